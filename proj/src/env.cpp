#include "clothpick/env.hpp"

#include "clothpick/config.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/grid.hpp"
#include "clothpick/raster.hpp"
#include "clothpick/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

namespace clothpick {

std::string to_string(Channel c) { return c == Channel::heightfield ? "heightfield" : "mask"; }

Channel parse_channel(const std::string& name) {
  if (name == "heightfield" || name == "depth") return Channel::heightfield;
  if (name == "mask") return Channel::mask;
  throw ConfigError("unknown observation channel '" + name + "'");
}

std::vector<Channel> parse_channels(const std::string& list) {
  std::vector<Channel> out;
  for (const std::string& part : split(list, ',')) {
    const std::string name = trim(part);
    if (name.empty()) continue;
    const Channel c = parse_channel(name);
    if (std::find(out.begin(), out.end(), c) != out.end()) throw ConfigError("duplicate channel '" + name + "'");
    out.push_back(c);
  }
  if (out.empty()) throw ConfigError("channel list is empty");
  return out;
}

std::string to_string(const std::vector<Channel>& channels) {
  std::string s;
  for (const Channel c : channels) {
    if (!s.empty()) s += ',';
    s += to_string(c);
  }
  return s;
}

int Observation::channel_index(Channel c) const {
  const auto it = std::find(channels.begin(), channels.end(), c);
  return it == channels.end() ? -1 : static_cast<int>(it - channels.begin());
}

Eigen::Block<const mat, 1, Eigen::Dynamic, false> Observation::channel(Channel c) const {
  const int i = channel_index(c);
  if (i < 0) throw ContractError("observation has no " + to_string(c) + " channel");
  return data.row(i);
}

ObsParams ObsParams::from_config(const Config& config) {
  ObsParams p;
  p.resolution = static_cast<int>(config.get_int("obs.resolution"));
  p.channels = parse_channels(config.get("obs.channels"));
  p.z_max = config.get_double("obs.z_max");
  p.thickness = config.get_double("sim.thickness");
  if (p.resolution < 16) throw ConfigError("obs.resolution must be >= 16");
  if (!(p.z_max > 0)) throw ConfigError("obs.z_max must be > 0");
  return p;
}

int Mask::count() const {
  int n = 0;
  for (const std::uint8_t c : cells) n += c != 0;
  return n;
}

Observation render_observation(const ClothState& state, const ObsParams& params) {
  const int res = params.resolution;
  if (res < 16) throw ContractError("observation resolution must be >= 16");
  const std::size_t cells = static_cast<std::size_t>(res) * res;

  // Mean particle height of each lattice quad.
  const int qcols = state.cols - 1;
  std::vector<real> quad_z(static_cast<std::size_t>((state.rows - 1) * qcols));
  for (int r = 0; r + 1 < state.rows; ++r) {
    for (int c = 0; c < qcols; ++c) {
      const real z = state.positions(2, state.index(r, c)) + state.positions(2, state.index(r, c + 1)) +
                     state.positions(2, state.index(r + 1, c + 1)) + state.positions(2, state.index(r + 1, c));
      quad_z[static_cast<std::size_t>(r * qcols + c)] = 0.25 * z;
    }
  }
  std::vector<real> height(cells, -1);
  std::vector<int> layers(cells, 0);
  raster::for_each_covered_cell(state.positions, state.rows, state.cols, res, [&](int cell, int quad) {
    real& h = height[static_cast<std::size_t>(cell)];
    h = std::max(h, quad_z[static_cast<std::size_t>(quad)]);
    ++layers[static_cast<std::size_t>(cell)];
  });

  Observation obs;
  obs.resolution = res;
  obs.channels = params.channels;
  obs.data.resize(static_cast<Eigen::Index>(params.channels.size()), static_cast<Eigen::Index>(cells));
  for (std::size_t k = 0; k < params.channels.size(); ++k) {
    for (std::size_t i = 0; i < cells; ++i) {
      const bool covered = height[i] >= 0;
      real v = -0.5;
      if (params.channels[k] == Channel::mask) {
        v = covered ? 0.5 : -0.5;
      } else if (covered) {
        // Stacked layers rest within a thickness of each other in the sim, so
        // each covering layer adds one thickness.
        const real top = std::max(height[i] + params.thickness, layers[i] * params.thickness);
        v = std::min(top, params.z_max) / params.z_max - 0.5;
      }
      obs.data(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = v;
    }
  }
  return obs;
}

real default_depth_threshold(real z_max) { return 1e-4 / z_max - 0.5; }

Mask extract_mask(const Observation& obs, real depth_threshold) {
  const auto h = obs.channel(Channel::heightfield);
  Mask m;
  m.resolution = obs.resolution;
  m.cells.resize(static_cast<std::size_t>(h.size()));
  for (Eigen::Index i = 0; i < h.size(); ++i) m.cells[static_cast<std::size_t>(i)] = h(i) > depth_threshold;
  return m;
}

Mask mask_channel(const Observation& obs) {
  const auto h = obs.channel(Channel::mask);
  Mask m;
  m.resolution = obs.resolution;
  m.cells.resize(static_cast<std::size_t>(h.size()));
  for (Eigen::Index i = 0; i < h.size(); ++i) m.cells[static_cast<std::size_t>(i)] = h(i) > 0;
  return m;
}

Observation transform_observation(const Observation& obs, int quarter_turns, bool vflip) {
  Observation out = obs;
  out.data = grid::transform_rows(obs.data, obs.resolution, quarter_turns, vflip);
  return out;
}

RewardKind parse_reward_kind(const std::string& name) {
  if (name == "clothpick") return RewardKind::clothpick;
  if (name == "coverage") return RewardKind::coverage;
  if (name == "delta") return RewardKind::delta;
  throw ConfigError("unknown reward.kind '" + name + "' (expected clothpick, coverage or delta)");
}

std::string to_string(RewardKind k) {
  switch (k) {
  case RewardKind::clothpick: return "clothpick";
  case RewardKind::coverage: return "coverage";
  case RewardKind::delta: return "delta";
  }
  return "?";
}

RewardParams RewardParams::from_config(const Config& config) {
  RewardParams p;
  p.kind = parse_reward_kind(config.get("reward.kind"));
  p.tau_high = config.get_double("reward.tau_high");
  p.eps_flat = config.get_double("reward.eps_flat");
  p.large_action = config.get_double("reward.large_action");
  p.penalty = config.get_double("reward.penalty");
  p.bonus = config.get_double("reward.bonus");
  return p;
}

real compute_reward(real nc_prev, real nc_next, const PickPlaceAction& action, const PickOutcome& outcome,
                    const RewardParams& params) {
  const real delta = nc_next - nc_prev;
  switch (params.kind) {
  case RewardKind::coverage: return nc_next;
  case RewardKind::delta: return delta;
  case RewardKind::clothpick: break;
  }
  real r = delta;
  if (!outcome.grasped) r -= params.penalty;
  if (action.max_abs() >= params.large_action) r -= params.penalty;
  if (delta < -params.eps_flat) r -= params.penalty;
  if (nc_next >= params.tau_high) r += params.bonus;
  return r;
}

int assign_tier(real nc) {
  if (nc >= 0.95) return 0;
  if (nc >= 0.70) return 1;
  if (nc >= 0.50) return 2;
  if (nc >= 0.35) return 3;
  return 4;
}

namespace {

std::pair<int, int> fold_range(const Config& config, const std::string& key) {
  const std::vector<std::string> parts = config.get_list(key);
  int bounds[2] = {0, 0};
  bool ok = parts.size() == 2;
  for (std::size_t i = 0; ok && i < 2; ++i) {
    const std::string t = trim(parts[i]);
    const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), bounds[i]);
    ok = ec == std::errc() && end == t.data() + t.size();
  }
  if (!ok || bounds[0] < 0 || bounds[1] < bounds[0]) throw ConfigError(key + " must be 'min,max' with 0 <= min <= max");
  return {bounds[0], bounds[1]};
}

} // namespace

EnvParams EnvParams::from_config(const Config& config) {
  EnvParams p;
  p.rows = static_cast<int>(config.get_int("cloth.rows"));
  p.cols = static_cast<int>(config.get_int("cloth.cols"));
  p.spacing = config.get_double("cloth.spacing");
  p.sim = SimParams::from_config(config);
  p.obs = ObsParams::from_config(config);
  p.reward = RewardParams::from_config(config);
  p.crumple.min_offset = config.get_double("crumple.min_offset");
  p.crumple.min_scale = config.get_double("crumple.min_scale");
  p.crumple.max_scale = config.get_double("crumple.max_scale");
  p.crumple.max_angle = config.get_double("crumple.max_angle");
  p.max_steps = static_cast<int>(config.get_int("env.max_steps"));
  p.coverage_resolution = static_cast<int>(config.get_int("env.coverage_resolution"));
  p.tier_attempts = static_cast<int>(config.get_int("env.tier_attempts"));
  p.max_translation = config.get_double("cloth.max_translation");
  p.max_rotation = config.get_double("cloth.max_rotation_deg") * std::numbers::pi / 180.0;
  for (int t = 0; t < kNumTiers; ++t)
    p.tier_folds[static_cast<std::size_t>(t)] = fold_range(config, "crumple.folds_tier" + std::to_string(t));
  p.any_folds = fold_range(config, "crumple.folds_any");
  if (p.max_steps < 1) throw ConfigError("env.max_steps must be >= 1");
  if (p.coverage_resolution < 16) throw ConfigError("env.coverage_resolution must be >= 16");
  if (p.tier_attempts < 1) throw ConfigError("env.tier_attempts must be >= 1");
  return p;
}

ClothEnv::ClothEnv(EnvParams params) : params_(std::move(params)) { params_.sim.validate(); }

Observation ClothEnv::reset(std::uint64_t seed, const ResetOptions& options) {
  if (options.target_tier && (*options.target_tier < 0 || *options.target_tier >= kNumTiers))
    throw ContractError("target tier must be in 0..4");
  const auto range = options.target_tier ? params_.tier_folds[static_cast<std::size_t>(*options.target_tier)]
                                         : params_.any_folds;
  for (int attempt = 0; attempt < params_.tier_attempts; ++attempt) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(attempt)}));
    Pose2 pose;
    pose.angle = rng.uniform(-params_.max_rotation, params_.max_rotation);
    pose.translation = vec2(rng.uniform(-params_.max_translation, params_.max_translation),
                            rng.uniform(-params_.max_translation, params_.max_translation));
    const int folds = options.folds ? *options.folds : rng.integer(range.first, range.second);
    const std::uint64_t crumple_seed = rng.next();

    ClothState flat = init_cloth(params_.rows, params_.cols, params_.spacing, pose);
    const int c_flat = clothpick::coverage(flat, params_.coverage_resolution);
    ClothState state = crumple(flat, crumple_seed, folds, params_.sim, params_.crumple);
    const int c0 = clothpick::coverage(state, params_.coverage_resolution);
    const real nc0 = static_cast<real>(c0) / c_flat;
    if (options.target_tier && assign_tier(nc0) != *options.target_tier) continue;
    if (options.min_nc && nc0 < *options.min_nc) continue;

    flat_ = std::move(flat);
    state_ = std::move(state);
    c_flat_ = c_flat;
    coverage_ = c0;
    c_initial_ = c0;
    tier_ = assign_tier(nc0);
    steps_ = 0;
    attempts_ = attempt + 1;
    started_ = true;
    obs_ = render_observation(state_, params_.obs);
    return obs_;
  }
  std::string what = "no initial state met the reset constraints after " + std::to_string(params_.tier_attempts) +
                     " attempts (seed " + std::to_string(seed);
  if (options.target_tier) what += ", tier " + std::to_string(*options.target_tier);
  if (options.min_nc) what += ", min NC " + std::to_string(*options.min_nc);
  throw GenerationError(what + ")");
}

StepResult ClothEnv::step(const PickPlaceAction& action) {
  if (!started_) throw LifecycleError("env step before reset");
  if (steps_ >= params_.max_steps)
    throw LifecycleError("episode finished after " + std::to_string(params_.max_steps) + " steps; call reset");
  const PickPlaceAction a = action.clamped();
  auto [next, outcome] = execute_pick_place(state_, a, params_.sim);
  state_ = std::move(next);

  StepResult out;
  out.info.coverage_before = coverage_;
  out.info.nc_before = nc();
  coverage_ = clothpick::coverage(state_, params_.coverage_resolution);
  out.info.coverage_after = coverage_;
  out.info.nc_after = nc();
  out.info.mispick = !outcome.grasped;
  out.info.tier = tier_;
  out.info.step = steps_;
  out.info.action = a;
  out.reward = compute_reward(out.info.nc_before, out.info.nc_after, a, outcome, params_.reward);
  ++steps_;
  obs_ = render_observation(state_, params_.obs);
  out.observation = obs_;
  return out;
}

} // namespace clothpick
