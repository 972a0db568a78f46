#ifndef CLOTHPICK_ENV_HPP
#define CLOTHPICK_ENV_HPP

#include "clothpick/action.hpp"
#include "clothpick/clothsim.hpp"
#include "clothpick/eigen.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace clothpick {

class Config;

enum class Channel : std::uint8_t { heightfield = 0, mask = 1 };

std::string to_string(Channel c);
Channel parse_channel(const std::string& name);
// Comma-separated channel list, e.g. "heightfield,mask". Order is kept.
std::vector<Channel> parse_channels(const std::string& list);
std::string to_string(const std::vector<Channel>& channels);

// Top-down grids in [-0.5, 0.5]. `data` holds one flattened res x res grid per
// row, in `channels` order; see grid.hpp for the cell layout.
struct Observation {
  int resolution = 0;
  std::vector<Channel> channels;
  mat data;

  int channel_index(Channel c) const;
  bool has(Channel c) const { return channel_index(c) >= 0; }
  // Throws ContractError if the channel is absent.
  Eigen::Block<const mat, 1, Eigen::Dynamic, false> channel(Channel c) const;

  friend bool operator==(const Observation& a, const Observation& b) {
    return a.resolution == b.resolution && a.channels == b.channels && a.data == b.data;
  }
};

struct ObsParams {
  int resolution = 32;
  std::vector<Channel> channels{Channel::heightfield, Channel::mask};
  real z_max = 0.2;
  // Added to particle heights so resting fabric renders above the table.
  real thickness = 0.02;

  static ObsParams from_config(const Config& config);
};

// Binary top-down grid, same layout as observation channels.
struct Mask {
  int resolution = 0;
  std::vector<std::uint8_t> cells;

  bool at(int row, int col) const { return cells[static_cast<std::size_t>(row * resolution + col)] != 0; }
  int count() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

// Heightfield cell: the larger of thickness plus the highest mean quad height
// among quads covering the cell centre and thickness times the number of
// covering quads, over z_max, minus 0.5; -0.5 where empty.
// Mask cell: 0.5 if covered, else -0.5.
Observation render_observation(const ClothState& state, const ObsParams& params);

// Rescaled heightfield value that corresponds to a height of 1e-4.
real default_depth_threshold(real z_max);

// Cells whose heightfield value exceeds depth_threshold.
Mask extract_mask(const Observation& obs, real depth_threshold);
// Mask channel read back from an observation (cells > 0).
Mask mask_channel(const Observation& obs);

Observation transform_observation(const Observation& obs, int quarter_turns, bool vflip);

enum class RewardKind : std::uint8_t { clothpick, coverage, delta };
RewardKind parse_reward_kind(const std::string& name);
std::string to_string(RewardKind k);

struct RewardParams {
  RewardKind kind = RewardKind::clothpick;
  real tau_high = 0.95;
  real eps_flat = 0.01;
  real large_action = 0.7;
  real penalty = 0.5;
  real bonus = 0.5;

  static RewardParams from_config(const Config& config);
};

// clothpick: (nc_next - nc_prev) - penalty for a mispick, for any action
// component with |a| >= large_action and for nc_next - nc_prev < -eps_flat,
// + bonus when nc_next >= tau_high. coverage: nc_next. delta: nc_next - nc_prev.
real compute_reward(real nc_prev, real nc_next, const PickPlaceAction& action, const PickOutcome& outcome,
                    const RewardParams& params = {});

int assign_tier(real nc_initial);
constexpr int kNumTiers = 5;

struct StepInfo {
  real nc_before = 0;
  real nc_after = 0;
  bool mispick = false;
  int coverage_before = 0;
  int coverage_after = 0;
  int tier = 0;
  int step = 0;
  PickPlaceAction action; // as executed, after clamping
};

struct StepResult {
  Observation observation;
  real reward = 0;
  StepInfo info;
};

struct EnvParams {
  int rows = 8;
  int cols = 8;
  real spacing = 0.1;
  SimParams sim;
  ObsParams obs;
  RewardParams reward;
  CrumpleParams crumple;
  int max_steps = 20;
  int coverage_resolution = 64;
  int tier_attempts = 100;
  real max_translation = 0.15;
  real max_rotation = 3.141592653589793;
  // Inclusive fold-count range per tier and for untargeted resets.
  std::array<std::pair<int, int>, kNumTiers> tier_folds{
      {{0, 1}, {1, 2}, {2, 5}, {5, 10}, {10, 12}}};
  std::pair<int, int> any_folds{0, 12};

  static EnvParams from_config(const Config& config);
};

struct ResetOptions {
  std::optional<int> target_tier;
  // Reject initial states with NC below this value.
  std::optional<real> min_nc;
  // Overrides the sampled fold count.
  std::optional<int> folds;
};

class ClothEnv {
public:
  explicit ClothEnv(EnvParams params);

  // Samples a pose and crumple until the options are met; throws
  // GenerationError after tier_attempts tries.
  Observation reset(std::uint64_t seed, const ResetOptions& options = {});
  StepResult step(const PickPlaceAction& action);

  const EnvParams& params() const { return params_; }
  const ClothState& state() const { return state_; }
  // The episode's flat lattice before crumpling; the oracle's target.
  const ClothState& flat_state() const { return flat_; }
  const Observation& observation() const { return obs_; }
  int c_flat() const { return c_flat_; }
  int coverage() const { return coverage_; }
  int initial_coverage() const { return c_initial_; }
  real nc() const { return static_cast<real>(coverage_) / c_flat_; }
  real nc_initial() const { return static_cast<real>(c_initial_) / c_flat_; }
  int tier() const { return tier_; }
  int steps_taken() const { return steps_; }
  bool done() const { return started_ && steps_ >= params_.max_steps; }
  int attempts_used() const { return attempts_; }

private:
  EnvParams params_;
  ClothState state_;
  ClothState flat_;
  Observation obs_;
  int c_flat_ = 1;
  int coverage_ = 0;
  int c_initial_ = 0;
  int tier_ = 0;
  int steps_ = 0;
  int attempts_ = 0;
  bool started_ = false;
};

} // namespace clothpick

#endif
