#ifndef CLOTHPICK_PLANNER_HPP
#define CLOTHPICK_PLANNER_HPP

#include "clothpick/action.hpp"
#include "clothpick/eigen.hpp"
#include "clothpick/env.hpp"
#include "clothpick/rssm.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace clothpick {

class Config;

enum class MaskSource : std::uint8_t { environment, model, none };
MaskSource parse_mask_source(const std::string& name);
std::string to_string(MaskSource m);

enum class RewardHead : std::uint8_t { prior, posterior };
RewardHead parse_reward_head(const std::string& name);

struct CemConfig {
  int population = 500;
  int iterations = 20;
  real elite_fraction = 0.1;
  int horizon = 1;
  real std_floor = 1e-3;
  MaskSource mask_source = MaskSource::environment;
  int max_rejection_tries = 50;
  RewardHead reward_head = RewardHead::prior;
  // Heightfield threshold used for environment masks.
  real depth_threshold = 1e-4 / 0.2 - 0.5;
  // Candidates are scored in fixed chunks so results do not depend on workers.
  int chunk = 256;
  int workers = 1;

  int elite_count() const;
  void validate() const;
  static CemConfig from_config(const Config& config);
};

// Search distribution over horizon stacked actions (4 * horizon).
struct CemDist {
  vec mean, std;

  static CemDist initial(int horizon);
};

struct SampleStats {
  int accepted = 0; // first picks accepted by rejection sampling
  int fallback = 0; // first picks drawn uniformly over the mask
};

// Point-in-mask test using the observation cell layout.
bool mask_contains(const Mask& mask, const vec2& p);

// Candidates are columns (4 * horizon x population). Candidate i draws from
// its own stream derive_seed(seed, {i}).
mat sample_candidates(const CemDist& dist, const CemConfig& config, const Mask* mask, std::uint64_t seed,
                      SampleStats* stats = nullptr);

// Sum over the horizon of predicted rewards along prior rollouts from `start`
// (one column). Candidate i uses noise stream derive_seed(seed, {i}).
vec score_candidates(const ModelParams<real>& params, const LatentState& start, const mat& candidates,
                     const CemConfig& config, std::uint64_t seed);
// Same with an explicit noise seed per candidate.
vec score_candidates(const ModelParams<real>& params, const LatentState& start, const mat& candidates,
                     const CemConfig& config, const std::vector<std::uint64_t>& seeds);

// Mean and per-dimension population std of the ceil(P * f) best columns
// (stable: ties go to the lower index), std floored.
CemDist refit(const CemDist& dist, const mat& candidates, const vec& scores, real elite_fraction, real std_floor);

struct PlanResult {
  PickPlaceAction action;
  real predicted_reward = 0;
  int iterations_run = 0;
  real mask_hit_rate = 1;
  std::vector<real> best_elite; // best elite score after each iteration
};

using ScoreFn = std::function<vec(const mat& candidates, std::uint64_t seed)>;

// CEM over an arbitrary score function. Elites are carried into the next
// iteration with their scores. With a mask the returned pick is snapped into it.
PlanResult cem_optimize(const ScoreFn& score, const CemConfig& config, const Mask* mask, std::uint64_t seed);

// Mask for the configured source, or nullopt for MaskSource::none.
std::optional<Mask> planning_mask(const ModelParams<real>& params, const LatentState& posterior,
                                  const Observation& obs, const CemConfig& config);

// Full planner: mask per config.mask_source, CEM on the model's prior rollouts.
PlanResult plan(const ModelParams<real>& params, const LatentState& posterior, const Observation& obs,
                const CemConfig& config, std::uint64_t seed);

} // namespace clothpick

#endif
