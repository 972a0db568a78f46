#ifndef CLOTHPICK_EXPERIMENTS_HPP
#define CLOTHPICK_EXPERIMENTS_HPP

#include "clothpick/config.hpp"
#include "clothpick/dataset.hpp"
#include "clothpick/eval.hpp"
#include "clothpick/rssm.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace clothpick {

struct PresetRun {
  std::string name;
  Config config;
};

// Exactly reward_study, ablation, planner_sweep, kl_study.
const std::vector<std::string>& preset_names();
// Throws ConfigError for unknown names.
std::vector<PresetRun> preset_runs(const std::string& preset, const Config& base);

// Hash of the keys that change the trained model (model, train, reward).
std::uint64_t training_hash(const Config& config);

// Rewards recomputed from the stored coverage, actions and mispick flags.
void relabel_rewards(Dataset& dataset, const RewardParams& reward);
// The first ceil(fraction * n) episodes, reindexed.
Dataset dataset_prefix(const Dataset& dataset, real fraction);

struct Diagnostics {
  long step = 0;
  real posterior_obs_mse = 0, prior_obs_mse = 0;
  real posterior_reward_mse = 0, prior_reward_mse = 0;
  real kl = 0;
  real posterior_entropy = 0, prior_entropy = 0;
};

// One-step prediction quality on a fixed batch with mean latents: posterior
// terms filter every step, prior terms predict step t from the posterior at
// t - 1. Reward and prior terms skip step 0.
Diagnostics diagnose(const ModelParams<real>& params, const SequenceBatch<real>& batch);
std::string diagnostics_csv_header();
std::string diagnostics_csv_row(const std::string& run, const Diagnostics& d);

struct PipelineOptions {
  std::filesystem::path out_dir;
  // Model reused for runs whose training_hash matches its config.
  std::optional<std::pair<Config, std::shared_ptr<const ModelParams<real>>>> pretrained;
  // Subset of run names; empty runs all.
  std::vector<std::string> only;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  std::string name;
  std::uint64_t config_hash = 0;
  TierReport report;
  std::vector<EpisodeTrace> traces;
};

// Trains (or reuses) a model per distinct training config and evaluates the
// planner of every run. Writes <out>/<run>/{config.txt, tier_report.csv,
// traces.csv}, trained models and a <preset>_summary.csv.
std::vector<RunResult> run_preset(const std::string& preset, const Config& base, const Dataset& dataset,
                                  const PipelineOptions& options);

std::string preset_summary_csv(const std::vector<PresetRun>& runs, const std::vector<RunResult>& results,
                               const std::vector<int>& record_steps);

} // namespace clothpick

#endif
