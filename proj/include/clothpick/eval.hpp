#ifndef CLOTHPICK_EVAL_HPP
#define CLOTHPICK_EVAL_HPP

#include "clothpick/action.hpp"
#include "clothpick/datagen.hpp"
#include "clothpick/env.hpp"
#include "clothpick/planner.hpp"
#include "clothpick/rssm.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace clothpick {

class Config;

real compute_nc(int coverage, int c_flat);
// (ct - c0) / (c_flat - c0); UndefinedNiError when c0 == c_flat.
real compute_ni(int c0, int ct, int c_flat);

class Agent {
public:
  virtual ~Agent() = default;
  virtual std::string name() const = 0;
  // Called after env.reset with the episode seed.
  virtual void begin(const ClothEnv& env, std::uint64_t seed) = 0;
  virtual PickPlaceAction act(const ClothEnv& env, int step) = 0;
  // Called with the executed action and the resulting observation.
  virtual void observe(const PickPlaceAction& action, const Observation& next) { (void)action, (void)next; }
};

// Scripted data-collection policy, step seeds derive_seed(seed, {step}).
class ScriptedAgent : public Agent {
public:
  explicit ScriptedAgent(PolicyKind kind, PolicyParams params = {});
  std::string name() const override;
  void begin(const ClothEnv& env, std::uint64_t seed) override;
  PickPlaceAction act(const ClothEnv& env, int step) override;

private:
  PolicyKind kind_;
  PolicyParams params_;
  std::uint64_t seed_ = 0;
};

// Always picks in the workspace corner; a no-op on any reachable cloth.
class IdleAgent : public Agent {
public:
  std::string name() const override { return "idle"; }
  void begin(const ClothEnv&, std::uint64_t) override {}
  PickPlaceAction act(const ClothEnv&, int) override { return {-1, -1, -1, -1}; }
};

// CEM planner on the latent model. The belief is filtered with the posterior
// mean (zero noise), starting from the zero state and zero action.
class PlannerAgent : public Agent {
public:
  PlannerAgent(std::shared_ptr<const ModelParams<real>> params, CemConfig config);
  std::string name() const override;
  void begin(const ClothEnv& env, std::uint64_t seed) override;
  PickPlaceAction act(const ClothEnv& env, int step) override;
  void observe(const PickPlaceAction& action, const Observation& next) override;

  const LatentState& belief() const { return belief_; }
  const PlanResult& last_plan() const { return last_; }
  const CemConfig& config() const { return config_; }

private:
  std::shared_ptr<const ModelParams<real>> params_;
  CemConfig config_;
  LatentState belief_;
  PlanResult last_;
  std::uint64_t seed_ = 0;
};

// Posterior update with zero noise (z = posterior mean).
LatentState filter_belief(const ModelParams<real>& params, const LatentState& prev, const PickPlaceAction& action,
                          const Observation& obs);

struct EpisodeTrace {
  std::uint64_t seed = 0;
  int target_tier = -1; // -1 when untargeted
  int tier = 0;         // assign_tier of the initial NC
  int c_flat = 1;
  std::vector<int> coverage;                // steps + 1
  std::vector<PickPlaceAction> actions;     // as executed
  std::vector<real> rewards;
  std::vector<std::uint8_t> mispick;
  std::vector<std::uint8_t> outside_mask;   // pick outside the observed cloth mask
  std::vector<real> predicted_rewards;      // planner agents only

  int steps() const { return static_cast<int>(actions.size()); }
  real nc(int t) const;
  // NaN when undefined (initial coverage equals the flat coverage).
  real ni(int t) const;
  bool any_outside_mask() const;
};

// Resets the env with `seed` (and the target tier if given) and runs the
// agent for max_steps. Errors are rethrown with the step index.
EpisodeTrace run_episode(Agent& agent, ClothEnv& env, std::uint64_t seed, std::optional<int> target_tier,
                         int max_steps);

struct EvalSpec {
  int episodes_per_tier = 20;
  std::vector<int> tiers{0, 1, 2, 3, 4};
  std::uint64_t seed = 1000000;
  std::vector<int> record_steps{5, 10, 20};
  int workers = 1;

  static EvalSpec from_config(const Config& config);
};

// Seed of episode i of a tier; the same for every agent.
std::uint64_t eval_episode_seed(std::uint64_t base, int tier, int i);

using AgentFactory = std::function<std::unique_ptr<Agent>()>;

// Traces ordered by tier then episode; one agent per worker.
std::vector<EpisodeTrace> evaluate(const AgentFactory& make_agent, const EnvParams& env_params, const EvalSpec& spec,
                                   const std::function<void(int done, int total)>& on_progress = {});

struct TierStats {
  std::string tier; // "0".."4" or "all"
  int step = 0;
  int count = 0;
  real nc_mean = 0, nc_std = 0;
  int ni_count = 0; // episodes with a defined NI
  real ni_mean = 0, ni_std = 0;
};

struct TierReport {
  std::vector<TierStats> rows; // per tier and record step, then "all"

  const TierStats& at(const std::string& tier, int step) const;
};

// Mean and population std per tier and step; "all" pools every episode.
TierReport tier_report(const std::vector<EpisodeTrace>& traces, const std::vector<int>& record_steps);
std::string tier_report_csv(const TierReport& report);
// Table-style text summary: NC and NI mean +- std per tier and step.
std::string tier_report_table(const TierReport& report);

std::string traces_csv(const std::vector<EpisodeTrace>& traces);

struct BenchReport {
  int trials = 0;
  real mean_ms = 0, p50_ms = 0, p95_ms = 0;
  std::size_t transition_parameters = 0;
  std::size_t total_parameters = 0;
  std::size_t dataset_episodes = 0;
};

// Nearest-rank percentile of `samples` (q in [0, 100]).
real percentile(std::vector<real> samples, real q);

// Wall time of agent.act on single-worker planning.
BenchReport bench_inference(Agent& agent, ClothEnv& env, int warmup, int trials, std::uint64_t seed);
std::string bench_report_csv(const BenchReport& report);

} // namespace clothpick

#endif
