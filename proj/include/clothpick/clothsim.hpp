#ifndef CLOTHPICK_CLOTHSIM_HPP
#define CLOTHPICK_CLOTHSIM_HPP

#include "clothpick/action.hpp"
#include "clothpick/eigen.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace clothpick {

class Config;

enum class SpringKind : std::uint8_t { structural, shear, bend };

struct Spring {
  int a = 0;
  int b = 0;
  real rest_length = 0;
  SpringKind kind = SpringKind::structural;
};

// Rigid placement of the lattice in the workspace plane.
struct Pose2 {
  real angle = 0; // radians
  vec2 translation = vec2::Zero();
};

// Particle lattice of the fabric. Columns of `positions` / `velocities` are
// particles in row-major lattice order; z is height above the table.
struct ClothState {
  mat3x positions;
  mat3x velocities;
  int rows = 0;
  int cols = 0;
  real rest_spacing = 0;
  std::vector<Spring> springs;
  std::optional<int> pinned;

  int size() const { return rows * cols; }
  int index(int r, int c) const { return r * cols + c; }
  std::array<int, 4> corners() const { return {0, cols - 1, (rows - 1) * cols, rows * cols - 1}; }

  // Throws ContractError when the structural invariants do not hold.
  void validate() const;

  friend bool operator==(const ClothState& a, const ClothState& b);
};

struct SimParams {
  real dt = 0.005;
  real gravity = 9.8;
  real k_structural = 800;
  real k_shear = 400;
  real k_bend = 20;
  real damping = 2.0;
  real ground_friction = 1.0;
  real particle_mass = 0.2;
  int settle_steps = 1000;
  real settle_velocity_eps = 0.01;
  real grasp_radius = 0.03;
  real lift_height = 0.12;
  int lift_steps = 20;
  real picker_speed = 1.0;
  // Cloth thickness: stacking distance between layers and rendered surface offset.
  real thickness = 0.02;
  // Horizontal radius within which two non-adjacent particles stack.
  real contact_radius = 0.075;
  // Penalty spring and damper holding stacked layers apart.
  real contact_stiffness = 800;
  real contact_damping = 10;

  static SimParams from_config(const Config& config);
  void validate() const;
};

struct PickOutcome {
  bool grasped = false;
  std::optional<int> grasped_particle;
  vec2 pick_point = vec2::Zero();
  vec2 place_point = vec2::Zero();
};

// Random folds carry a random particle towards and past the cloth centroid:
// the drag direction is rotated by up to +-max_angle radians and its length is
// the particle's distance to the centroid times U(min_scale, max_scale), but at
// least min_offset.
struct CrumpleParams {
  real min_offset = 0.15;
  real min_scale = 1.0;
  real max_scale = 2.0;
  real max_angle = 1.0;
};

// Flat rows x cols lattice at z = 0 centred on the pose translation.
// Throws ConfigError if any particle falls outside [-1,1]^2.
ClothState init_cloth(int rows, int cols, real spacing, const Pose2& pose = {});

// One semi-implicit Euler step. Deterministic; throws SimulationDivergence on
// non-finite results.
void step_physics_inplace(ClothState& state, const SimParams& params);
ClothState step_physics(ClothState state, const SimParams& params);

// Steps until the fastest particle is slower than settle_velocity_eps or
// settle_steps have elapsed. Returns the number of steps taken.
int settle_inplace(ClothState& state, const SimParams& params);

// Particle grasped by a point gripper at `pick`: the nearest particle in
// top-down projection, provided it is within grasp_radius or the pick lands
// on the fabric itself. Ties go to the lowest index.
std::optional<int> find_grasp(const ClothState& state, const vec2& pick, real grasp_radius);

// True if `p` lies in the top-down projection of any lattice quad.
bool on_cloth(const ClothState& state, const vec2& p);

std::pair<ClothState, PickOutcome> execute_pick_place(ClothState state, const PickPlaceAction& action,
                                                      const SimParams& params);

// Number of raster cells covered by the fabric's top-down projection.
int coverage(const ClothState& state, int raster_resolution);

ClothState crumple(ClothState state, std::uint64_t rng_seed, int num_random_folds, const SimParams& params,
                   const CrumpleParams& crumple_params = {});

real max_speed(const ClothState& state);
real kinetic_energy(const ClothState& state, real particle_mass);

// Applies k quarter turns (counter-clockwise, about the origin) and then an
// optional y -> -y flip to positions and velocities. Exact in floating point.
ClothState transform_state(const ClothState& state, int quarter_turns, bool vflip);
vec2 transform_point(const vec2& p, int quarter_turns, bool vflip);

} // namespace clothpick

#endif
