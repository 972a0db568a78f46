#include "clothpick/clothsim.hpp"

#include "clothpick/config.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/raster.hpp"
#include "clothpick/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace clothpick {

namespace {

real stiffness(const SimParams& p, SpringKind kind) {
  switch (kind) {
  case SpringKind::structural: return p.k_structural;
  case SpringKind::shear: return p.k_shear;
  case SpringKind::bend: return p.k_bend;
  }
  return 0;
}

bool lattice_adjacent(const ClothState& s, int i, int j) {
  const int ri = i / s.cols, ci = i % s.cols;
  const int rj = j / s.cols, cj = j % s.cols;
  return std::abs(ri - rj) <= 1 && std::abs(ci - cj) <= 1;
}

// Soft layering between non-adjacent particles. Pairs closer than the
// ellipsoid with horizontal radius contact_radius and vertical radius
// thickness repel through the potential k t^2 (1 - q)^2 / 2, q being the
// scaled distance, plus a damper along the contact normal. The potential is
// smooth, so layers form without popping when particles meet at equal height.
// The higher particle of a touching pair is marked as supported.
void add_contact_forces(const ClothState& s, const SimParams& p, mat3x& force, std::vector<char>& supported) {
  if (p.contact_radius <= 0 || p.thickness <= 0 || p.contact_stiffness <= 0) return;
  constexpr real kMinScaledDistance = 1e-3;
  const int n = s.size();
  const real inv_r2 = 1 / (p.contact_radius * p.contact_radius);
  const real inv_t2 = 1 / (p.thickness * p.thickness);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (lattice_adjacent(s, i, j)) continue;
      const vec3 d = s.positions.col(j) - s.positions.col(i);
      const real q2 = (d.x() * d.x() + d.y() * d.y()) * inv_r2 + d.z() * d.z() * inv_t2;
      if (q2 >= 1) continue;
      const real q = std::max(std::sqrt(q2), kMinScaledDistance);
      const vec3 grad(d.x() * inv_r2 / q, d.y() * inv_r2 / q, d.z() * inv_t2 / q);
      const real gnorm = grad.norm();
      if (gnorm <= 0) continue;
      const vec3 normal = grad / gnorm;
      const real rel_v = normal.dot(s.velocities.col(j) - s.velocities.col(i));
      const vec3 f = p.contact_stiffness * p.thickness * p.thickness * (1 - q) * grad -
                     p.contact_damping * (1 - q) * rel_v * normal;
      force.col(j) += f;
      force.col(i) -= f;
      if (d.z() > 0) supported[static_cast<std::size_t>(j)] = 1;
      if (d.z() < 0) supported[static_cast<std::size_t>(i)] = 1;
    }
  }
}

void check_finite(const ClothState& s) {
  if (!s.positions.allFinite() || !s.velocities.allFinite())
    throw SimulationDivergence("non-finite particle state after physics step; reduce sim.dt");
}

} // namespace

void ClothState::validate() const {
  const int n = rows * cols;
  if (rows < 2 || cols < 2) throw ContractError("cloth lattice needs at least 2x2 particles");
  if (positions.cols() != n || velocities.cols() != n)
    throw ContractError("cloth state size does not match rows*cols");
  for (const Spring& s : springs) {
    if (s.a < 0 || s.b < 0 || s.a >= n || s.b >= n || s.a == s.b)
      throw ContractError("spring references invalid particle indices");
    if (!(s.rest_length > 0)) throw ContractError("spring rest length must be positive");
  }
  if (pinned && (*pinned < 0 || *pinned >= n)) throw ContractError("pinned particle index out of range");
}

bool operator==(const ClothState& a, const ClothState& b) {
  if (a.rows != b.rows || a.cols != b.cols || a.rest_spacing != b.rest_spacing || a.pinned != b.pinned) return false;
  if (a.positions.cols() != b.positions.cols() || a.velocities.cols() != b.velocities.cols()) return false;
  if (a.positions != b.positions || a.velocities != b.velocities) return false;
  if (a.springs.size() != b.springs.size()) return false;
  for (std::size_t i = 0; i < a.springs.size(); ++i) {
    const Spring& x = a.springs[i];
    const Spring& y = b.springs[i];
    if (x.a != y.a || x.b != y.b || x.rest_length != y.rest_length || x.kind != y.kind) return false;
  }
  return true;
}

SimParams SimParams::from_config(const Config& c) {
  SimParams p;
  p.dt = c.get_double("sim.dt");
  p.gravity = c.get_double("sim.gravity");
  p.k_structural = c.get_double("sim.k_structural");
  p.k_shear = c.get_double("sim.k_shear");
  p.k_bend = c.get_double("sim.k_bend");
  p.damping = c.get_double("sim.damping");
  p.ground_friction = c.get_double("sim.ground_friction");
  p.particle_mass = c.get_double("sim.particle_mass");
  p.settle_steps = static_cast<int>(c.get_int("sim.settle_steps"));
  p.settle_velocity_eps = c.get_double("sim.settle_velocity_eps");
  p.grasp_radius = c.get_double("sim.grasp_radius");
  p.lift_height = c.get_double("sim.lift_height");
  p.lift_steps = static_cast<int>(c.get_int("sim.lift_steps"));
  p.picker_speed = c.get_double("sim.picker_speed");
  p.thickness = c.get_double("sim.thickness");
  p.contact_radius = c.get_double("sim.contact_radius");
  p.contact_stiffness = c.get_double("sim.contact_stiffness");
  p.contact_damping = c.get_double("sim.contact_damping");
  p.validate();
  return p;
}

void SimParams::validate() const {
  if (!(dt > 0)) throw ConfigError("sim.dt must be > 0");
  if (!(grasp_radius > 0)) throw ConfigError("sim.grasp_radius must be > 0");
  if (settle_steps < 1) throw ConfigError("sim.settle_steps must be >= 1");
  if (!(particle_mass > 0)) throw ConfigError("sim.particle_mass must be > 0");
  if (lift_steps < 1) throw ConfigError("sim.lift_steps must be >= 1");
  if (!(picker_speed > 0)) throw ConfigError("sim.picker_speed must be > 0");
  if (thickness < 0 || contact_radius < 0 || contact_stiffness < 0 || contact_damping < 0 || damping < 0 ||
      ground_friction < 0)
    throw ConfigError("sim thickness, contact, damping and ground_friction values must be >= 0");
}

ClothState init_cloth(int rows, int cols, real spacing, const Pose2& pose) {
  if (rows < 2 || cols < 2) throw ConfigError("cloth needs at least 2x2 particles");
  if (!(spacing > 0)) throw ConfigError("cloth spacing must be > 0");
  ClothState s;
  s.rows = rows;
  s.cols = cols;
  s.rest_spacing = spacing;
  s.positions = mat3x::Zero(3, rows * cols);
  s.velocities = mat3x::Zero(3, rows * cols);
  const real ca = std::cos(pose.angle), sa = std::sin(pose.angle);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const real lx = (c - 0.5 * (cols - 1)) * spacing;
      const real ly = (r - 0.5 * (rows - 1)) * spacing;
      const real x = pose.angle == 0 ? lx : ca * lx - sa * ly;
      const real y = pose.angle == 0 ? ly : sa * lx + ca * ly;
      s.positions.col(s.index(r, c)) << x + pose.translation.x(), y + pose.translation.y(), 0;
    }
  }
  if (s.positions.topRows<2>().cwiseAbs().maxCoeff() > 1.0)
    throw ConfigError("cloth footprint does not fit inside the [-1,1]^2 workspace");

  const real diag = spacing * std::numbers::sqrt2;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int i = s.index(r, c);
      if (c + 1 < cols) s.springs.push_back({i, s.index(r, c + 1), spacing, SpringKind::structural});
      if (r + 1 < rows) s.springs.push_back({i, s.index(r + 1, c), spacing, SpringKind::structural});
    }
  }
  for (int r = 0; r + 1 < rows; ++r) {
    for (int c = 0; c + 1 < cols; ++c) {
      s.springs.push_back({s.index(r, c), s.index(r + 1, c + 1), diag, SpringKind::shear});
      s.springs.push_back({s.index(r, c + 1), s.index(r + 1, c), diag, SpringKind::shear});
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int i = s.index(r, c);
      if (c + 2 < cols) s.springs.push_back({i, s.index(r, c + 2), 2 * spacing, SpringKind::bend});
      if (r + 2 < rows) s.springs.push_back({i, s.index(r + 2, c), 2 * spacing, SpringKind::bend});
    }
  }
  return s;
}

void step_physics_inplace(ClothState& s, const SimParams& p) {
  const int n = s.size();
  mat3x force = mat3x::Zero(3, n);
  force.row(2).setConstant(-p.gravity * p.particle_mass);
  force -= p.damping * s.velocities;
  for (const Spring& sp : s.springs) {
    const vec3 d = s.positions.col(sp.b) - s.positions.col(sp.a);
    const real len = d.norm();
    if (len <= 0) continue;
    const vec3 f = stiffness(p, sp.kind) * (len - sp.rest_length) / len * d;
    force.col(sp.a) += f;
    force.col(sp.b) -= f;
  }
  std::vector<char> supported(static_cast<std::size_t>(n), 0);
  add_contact_forces(s, p, force, supported);

  for (int i = 0; i < n; ++i) {
    if (s.pinned && *s.pinned == i) continue;
    s.velocities.col(i) += p.dt / p.particle_mass * force.col(i);
    s.positions.col(i) += p.dt * s.velocities.col(i);
  }

  for (int i = 0; i < n; ++i) {
    if (s.pinned && *s.pinned == i) continue;
    if (s.positions(2, i) <= 0) {
      s.positions(2, i) = 0;
      if (s.velocities(2, i) < 0) s.velocities(2, i) = 0;
      supported[i] = 1;
    }
    if (!supported[i] || p.ground_friction <= 0) continue;
    // Coulomb friction against the supporting surface with normal force m*g.
    const real vx = s.velocities(0, i), vy = s.velocities(1, i);
    const real speed = std::sqrt(vx * vx + vy * vy);
    const real dv = p.ground_friction * p.gravity * p.dt;
    if (speed <= dv) {
      s.velocities(0, i) = 0;
      s.velocities(1, i) = 0;
    } else {
      const real scale = 1 - dv / speed;
      s.velocities(0, i) = vx * scale;
      s.velocities(1, i) = vy * scale;
    }
  }
  check_finite(s);
}

ClothState step_physics(ClothState state, const SimParams& params) {
  state.validate();
  step_physics_inplace(state, params);
  return state;
}

real max_speed(const ClothState& s) {
  if (s.size() == 0) return 0;
  return s.velocities.colwise().norm().maxCoeff();
}

real kinetic_energy(const ClothState& s, real particle_mass) {
  return 0.5 * particle_mass * s.velocities.squaredNorm();
}

int settle_inplace(ClothState& s, const SimParams& p) {
  constexpr int kMinSteps = 5;
  int steps = 0;
  while (steps < p.settle_steps) {
    step_physics_inplace(s, p);
    ++steps;
    if (steps >= kMinSteps && max_speed(s) < p.settle_velocity_eps) break;
  }
  return steps;
}

bool on_cloth(const ClothState& s, const vec2& pt) {
  for (int r = 0; r + 1 < s.rows; ++r) {
    for (int c = 0; c + 1 < s.cols; ++c) {
      const int ids[4] = {s.index(r, c), s.index(r, c + 1), s.index(r + 1, c + 1), s.index(r + 1, c)};
      real x[4], y[4];
      for (int k = 0; k < 4; ++k) {
        x[k] = s.positions(0, ids[k]);
        y[k] = s.positions(1, ids[k]);
      }
      if (raster::in_quad(x, y, pt.x(), pt.y())) return true;
    }
  }
  return false;
}

std::optional<int> find_grasp(const ClothState& s, const vec2& pick, real grasp_radius) {
  int best = -1;
  real best_d2 = std::numeric_limits<real>::infinity();
  for (int i = 0; i < s.size(); ++i) {
    const real dx = s.positions(0, i) - pick.x();
    const real dy = s.positions(1, i) - pick.y();
    const real d2 = dx * dx + dy * dy;
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  if (best < 0) return std::nullopt;
  if (best_d2 <= grasp_radius * grasp_radius || on_cloth(s, pick)) return best;
  return std::nullopt;
}

std::pair<ClothState, PickOutcome> execute_pick_place(ClothState s, const PickPlaceAction& action,
                                                      const SimParams& p) {
  if (!action.in_range()) throw ContractError("pick-place action components must be finite and within [-1,1]");
  s.validate();
  PickOutcome out;
  out.pick_point = action.pick();
  out.place_point = action.place();

  const auto grasp = find_grasp(s, out.pick_point, p.grasp_radius);
  if (!grasp) {
    settle_inplace(s, p);
    return {std::move(s), out};
  }
  out.grasped = true;
  out.grasped_particle = grasp;
  const int g = *grasp;
  s.pinned = g;

  auto move_pinned = [&](const vec3& target) {
    s.velocities.col(g) = (target - s.positions.col(g)) / p.dt;
    s.positions.col(g) = target;
    step_physics_inplace(s, p);
  };

  const vec3 start = s.positions.col(g);
  for (int k = 1; k <= p.lift_steps; ++k) {
    const real t = static_cast<real>(k) / p.lift_steps;
    move_pinned({start.x(), start.y(), start.z() + t * (p.lift_height - start.z())});
  }
  const vec2 from = start.head<2>();
  const real dist = (out.place_point - from).norm();
  const int travel_steps = std::max(1, static_cast<int>(std::ceil(dist / (p.picker_speed * p.dt))));
  for (int k = 1; k <= travel_steps; ++k) {
    const real t = static_cast<real>(k) / travel_steps;
    const vec2 xy = from + t * (out.place_point - from);
    move_pinned({xy.x(), xy.y(), p.lift_height});
  }
  s.pinned.reset();
  s.velocities.col(g).setZero();
  settle_inplace(s, p);
  return {std::move(s), out};
}

int coverage(const ClothState& s, int raster_resolution) {
  if (raster_resolution < 16) throw ContractError("coverage raster resolution must be >= 16");
  std::vector<char> covered(static_cast<std::size_t>(raster_resolution) * raster_resolution, 0);
  raster::for_each_covered_cell(s.positions, s.rows, s.cols, raster_resolution,
                                [&](int cell, int) { covered[static_cast<std::size_t>(cell)] = 1; });
  int count = 0;
  for (const char c : covered) count += c;
  return count;
}

ClothState crumple(ClothState s, std::uint64_t rng_seed, int num_random_folds, const SimParams& p,
                   const CrumpleParams& cp) {
  if (num_random_folds < 0) throw ContractError("num_random_folds must be >= 0");
  Rng rng(rng_seed);
  for (int f = 0; f < num_random_folds; ++f) {
    // Pick a random particle and fold it across the fabric: the place point
    // lies past the centroid along a jittered direction, so the lifted part
    // lands on the rest of the cloth.
    const int particle = static_cast<int>(rng.index(static_cast<std::uint64_t>(s.size())));
    const vec2 pick = s.positions.col(particle).head<2>();
    const vec2 centroid = s.positions.topRows<2>().rowwise().mean();
    vec2 dir = centroid - pick;
    const real reach = dir.norm();
    if (reach < 1e-6) dir = vec2(1, 0);
    dir.normalize();
    const real jitter = rng.uniform(-cp.max_angle, cp.max_angle);
    const real c = std::cos(jitter), sn = std::sin(jitter);
    dir = vec2(c * dir.x() - sn * dir.y(), sn * dir.x() + c * dir.y());
    const real length = std::max(cp.min_offset, reach * rng.uniform(cp.min_scale, cp.max_scale));
    const vec2 place = pick + length * dir;
    const PickPlaceAction a = PickPlaceAction{pick.x(), pick.y(), place.x(), place.y()}.clamped();
    s = execute_pick_place(std::move(s), a, p).first;
  }
  return s;
}

vec2 transform_point(const vec2& p, int quarter_turns, bool vflip) {
  vec2 q = p;
  for (int k = 0; k < ((quarter_turns % 4) + 4) % 4; ++k) q = vec2(-q.y(), q.x());
  if (vflip) q.y() = -q.y();
  return q;
}

ClothState transform_state(const ClothState& state, int quarter_turns, bool vflip) {
  ClothState out = state;
  for (int i = 0; i < state.size(); ++i) {
    out.positions.col(i).head<2>() = transform_point(state.positions.col(i).head<2>(), quarter_turns, vflip);
    out.velocities.col(i).head<2>() = transform_point(state.velocities.col(i).head<2>(), quarter_turns, vflip);
  }
  return out;
}

} // namespace clothpick
