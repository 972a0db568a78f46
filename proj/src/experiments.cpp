#include "clothpick/experiments.hpp"

#include "clothpick/errors.hpp"
#include "clothpick/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace clothpick {

namespace {

namespace fs = std::filesystem;

std::string fmt(real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

PresetRun with(const std::string& name, const Config& base, std::initializer_list<std::pair<const char*, const char*>> kv) {
  PresetRun r{name, base};
  for (const auto& [k, v] : kv) r.config.set(k, v);
  return r;
}

matrix<real> rows_of(const mat& obs, const std::vector<Channel>& have, const std::vector<Channel>& want, int cells) {
  mat out(static_cast<Eigen::Index>(want.size()) * cells, obs.cols());
  for (std::size_t k = 0; k < want.size(); ++k) {
    const auto it = std::find(have.begin(), have.end(), want[k]);
    if (it == have.end()) throw ContractError("channel '" + to_string(want[k]) + "' is not in the batch");
    out.middleRows(static_cast<Eigen::Index>(k) * cells, cells) =
        obs.middleRows(static_cast<Eigen::Index>(it - have.begin()) * cells, cells);
  }
  return out;
}

real entropy(const mat& std) {
  const real c = 0.5 * std::log(2 * std::numbers::pi * std::numbers::e);
  return (std.array().log() + c).colwise().sum().mean();
}

} // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"reward_study", "ablation", "planner_sweep", "kl_study"};
  return names;
}

std::vector<PresetRun> preset_runs(const std::string& preset, const Config& base) {
  if (preset == "reward_study")
    return {with("clothpick", base, {{"reward.kind", "clothpick"}}), with("coverage", base, {{"reward.kind", "coverage"}}),
            with("delta", base, {{"reward.kind", "delta"}})};
  if (preset == "ablation")
    return {PresetRun{"full", base},
            with("no_mask", base, {{"plan.mask_source", "none"}}),
            with("no_kl_balancing", base, {{"train.kl_balancing", "false"}}),
            with("no_prior_reward", base, {{"train.w_prior_reward", "0"}, {"plan.reward_head", "posterior"}}),
            with("no_augmentation", base, {{"train.rotate", "false"}, {"train.vflip", "false"}, {"train.obs_noise_std", "0"}}),
            with("small_data", base, {{"train.data_fraction", "0.25"}})};
  if (preset == "planner_sweep")
    return {with("horizon_1", base, {{"plan.horizon", "1"}}),
            with("horizon_2", base, {{"plan.horizon", "2"}}),
            with("horizon_3", base, {{"plan.horizon", "3"}}),
            with("population_100", base, {{"plan.population", "100"}}),
            with("population_2000", base, {{"plan.population", "2000"}}),
            with("iterations_5", base, {{"plan.iterations", "5"}}),
            with("iterations_50", base, {{"plan.iterations", "50"}})};
  if (preset == "kl_study")
    return {with("kl_balanced", base, {{"train.kl_balancing", "true"}}),
            with("kl_plain", base, {{"train.kl_balancing", "false"}})};
  std::string names;
  for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + preset + "' (" + names + ")");
}

std::uint64_t training_hash(const Config& config) {
  Config sub;
  std::string text;
  for (const auto& [k, v] : config.entries()) {
    const bool relevant = k.rfind("model.", 0) == 0 || k.rfind("train.", 0) == 0 || k.rfind("reward.", 0) == 0;
    if (!relevant || k == "train.checkpoint_every" || k == "train.log_every") continue;
    text += k + " = " + v + "\n";
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : text) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

void relabel_rewards(Dataset& dataset, const RewardParams& reward) {
  for (Episode& e : dataset.episodes) {
    for (int t = 0; t < e.steps(); ++t) {
      const auto ti = static_cast<std::size_t>(t);
      PickOutcome outcome;
      outcome.grasped = e.mispick[ti] == 0;
      e.rewards[ti] = static_cast<float>(compute_reward(e.nc(t), e.nc(t + 1), e.actions[ti], outcome, reward));
    }
  }
}

Dataset dataset_prefix(const Dataset& dataset, real fraction) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("train.data_fraction must be in (0, 1]");
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<real>(dataset.episodes.size()) - 1e-9));
  Dataset out;
  out.header = dataset.header;
  out.episodes.assign(dataset.episodes.begin(), dataset.episodes.begin() + static_cast<std::ptrdiff_t>(n));
  out.header.episode_count = static_cast<std::uint32_t>(n);
  return out;
}

Diagnostics diagnose(const ModelParams<real>& params, const SequenceBatch<real>& batch) {
  batch.validate();
  const ModelDims& d = params.dims;
  const int L = batch.length(), B = batch.batch();
  if (L < 2) throw ContractError("diagnostics need sequences of length >= 2");
  const int cells = d.resolution * d.resolution;
  const mat zero = mat::Zero(d.stoch, B);
  Diagnostics out;
  LatentState post = LatentState::zeros(d, B);
  for (int t = 0; t < L; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const mat x = rows_of(batch.obs[ti], batch.channels, d.input_channels, cells);
    const mat y = rows_of(batch.obs[ti], batch.channels, d.output_channels, cells);
    const LatentState prev = post;
    post = posterior_step<real>(params, prev, batch.actions[ti], x, zero);
    const auto [grid_q, reward_q] = decode<real>(params, post);
    out.posterior_obs_mse += (grid_q - y).array().square().mean();
    out.posterior_entropy += entropy(post.std);
    if (t == 0) continue;
    const LatentState prior = prior_step<real>(params, prev, batch.actions[ti], zero);
    const auto [grid_p, unused] = decode<real>(params, prior);
    out.prior_obs_mse += (grid_p - y).array().square().mean();
    out.posterior_reward_mse += (reward_q - batch.rewards[ti]).array().square().mean();
    out.prior_reward_mse += (predict_reward_prior<real>(params, prior) - batch.rewards[ti]).array().square().mean();
    out.kl += kl_divergence<real>(post.mean, post.std, prior.mean, prior.std).mean();
    out.prior_entropy += entropy(prior.std);
  }
  out.posterior_obs_mse /= L;
  out.posterior_entropy /= L;
  for (real* v : {&out.prior_obs_mse, &out.posterior_reward_mse, &out.prior_reward_mse, &out.kl, &out.prior_entropy})
    *v /= L - 1;
  return out;
}

std::string diagnostics_csv_header() {
  return "run,step,posterior_obs_mse,prior_obs_mse,posterior_reward_mse,prior_reward_mse,kl,posterior_entropy,"
         "prior_entropy";
}

std::string diagnostics_csv_row(const std::string& run, const Diagnostics& d) {
  return run + "," + std::to_string(d.step) + "," + fmt(d.posterior_obs_mse) + "," + fmt(d.prior_obs_mse) + "," +
         fmt(d.posterior_reward_mse) + "," + fmt(d.prior_reward_mse) + "," + fmt(d.kl) + "," +
         fmt(d.posterior_entropy) + "," + fmt(d.prior_entropy);
}

std::vector<RunResult> run_preset(const std::string& preset, const Config& base, const Dataset& dataset,
                                  const PipelineOptions& options) {
  const std::vector<PresetRun> all = preset_runs(preset, base);
  std::vector<PresetRun> runs;
  for (const PresetRun& r : all)
    if (options.only.empty() || std::find(options.only.begin(), options.only.end(), r.name) != options.only.end())
      runs.push_back(r);
  for (const std::string& name : options.only)
    if (std::none_of(all.begin(), all.end(), [&](const PresetRun& r) { return r.name == name; }))
      throw ConfigError("preset " + preset + " has no run named '" + name + "'");

  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  fs::create_directories(options.out_dir / "models");
  std::map<std::uint64_t, std::shared_ptr<const ModelParams<real>>> models;
  if (options.pretrained) models[training_hash(options.pretrained->first)] = options.pretrained->second;

  const bool kl_study = preset == "kl_study";
  std::string diag_csv = diagnostics_csv_header() + "\n";

  std::vector<RunResult> results;
  for (const PresetRun& run : runs) {
    const Config& cfg = run.config;
    const std::uint64_t th = training_hash(cfg);
    auto it = models.find(th);
    if (it == models.end() || kl_study) {
      log(run.name + ": training model " + hex(th));
      Dataset data = dataset_prefix(dataset, cfg.get_double("train.data_fraction"));
      relabel_rewards(data, RewardParams::from_config(cfg));
      const TrainConfig tc = TrainConfig::from_config(cfg);
      TrainState state = TrainState::fresh(ModelDims::from_config(cfg), tc.seed, cfg.get_double("model.init_scale"));
      std::ofstream loss(options.out_dir / "models" / (hex(th) + "_loss.csv"), std::ios::trunc);
      loss << loss_csv_header() << '\n';
      TrainCallbacks cb;
      cb.on_log = [&](const LossRecord& r) { loss << loss_csv_row(r) << '\n'; };
      SequenceBatch<real> probe;
      if (kl_study) {
        probe = sample_batch(data, 64, tc.seq_len, derive_seed(tc.seed, {0x6469616775ULL}));
        Diagnostics d0 = diagnose(state.params, probe);
        diag_csv += diagnostics_csv_row(run.name, d0) + "\n";
        cb.on_checkpoint = [&](const TrainState& s) {
          Diagnostics d = diagnose(s.params, probe);
          d.step = s.step;
          diag_csv += diagnostics_csv_row(run.name, d) + "\n";
        };
      }
      train(state, data, tc, cb);
      write_checkpoint(options.out_dir / "models" / (hex(th) + ".ckpt"), state, cfg);
      it = models.insert_or_assign(th, std::make_shared<const ModelParams<real>>(state.params)).first;
    } else {
      log(run.name + ": reusing model " + hex(th));
    }

    const std::shared_ptr<const ModelParams<real>> params = it->second;
    const CemConfig cem = CemConfig::from_config(cfg);
    const EvalSpec spec = EvalSpec::from_config(cfg);
    log(run.name + ": evaluating " + std::to_string(spec.episodes_per_tier * static_cast<int>(spec.tiers.size())) +
        " episodes");
    RunResult res;
    res.name = run.name;
    res.config_hash = cfg.hash();
    res.traces = evaluate([&] { return std::make_unique<PlannerAgent>(params, cem); }, EnvParams::from_config(cfg), spec);
    res.report = tier_report(res.traces, spec.record_steps);

    const fs::path dir = options.out_dir / run.name;
    fs::create_directories(dir);
    cfg.save(dir / "config.txt");
    write_text(dir / "tier_report.csv", tier_report_csv(res.report));
    write_text(dir / "traces.csv", traces_csv(res.traces));
    results.push_back(std::move(res));
  }
  write_text(options.out_dir / (preset + "_summary.csv"),
             preset_summary_csv(runs, results, EvalSpec::from_config(base).record_steps));
  if (kl_study) write_text(options.out_dir / "kl_study_diagnostics.csv", diag_csv);
  return results;
}

std::string preset_summary_csv(const std::vector<PresetRun>& runs, const std::vector<RunResult>& results,
                               const std::vector<int>& record_steps) {
  std::ostringstream out;
  out << "run,config_hash,mask_source,horizon,population,iterations,kl_balancing,reward_kind,step,count,nc_mean,"
         "nc_std,ni_count,ni_mean,ni_std,outside_mask_rate\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const Config& c = runs.at(i).config;
    const RunResult& r = results[i];
    real outside = 0;
    for (const EpisodeTrace& t : r.traces) outside += t.any_outside_mask() ? 1 : 0;
    outside /= static_cast<real>(std::max<std::size_t>(1, r.traces.size()));
    for (const int k : record_steps) {
      const TierStats& s = r.report.at("all", k);
      out << r.name << ',' << hex(r.config_hash) << ',' << c.get("plan.mask_source") << ',' << c.get("plan.horizon")
          << ',' << c.get("plan.population") << ',' << c.get("plan.iterations") << ',' << c.get("train.kl_balancing")
          << ',' << c.get("reward.kind") << ',' << k << ',' << s.count << ',' << fmt(s.nc_mean) << ','
          << fmt(s.nc_std) << ',' << s.ni_count << ',' << fmt(s.ni_mean) << ',' << fmt(s.ni_std) << ','
          << fmt(outside) << '\n';
    }
  }
  return out.str();
}

} // namespace clothpick
