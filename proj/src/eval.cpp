#include "clothpick/eval.hpp"

#include "clothpick/config.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/rng.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace clothpick {

namespace {

std::string fmt(real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(real v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Step t with a new exception of the same category.
[[noreturn]] void rethrow_at_step(int t) {
  const std::string where = "step " + std::to_string(t) + ": ";
  try {
    throw;
  } catch (const PlanningError& e) {
    throw PlanningError(where + e.what());
  } catch (const NumericError& e) {
    throw NumericError(where + e.what());
  } catch (const SimulationDivergence& e) {
    throw SimulationDivergence(where + e.what());
  }
}

} // namespace

real compute_nc(int coverage, int c_flat) {
  if (c_flat <= 0) throw ContractError("flat coverage must be positive");
  return static_cast<real>(coverage) / c_flat;
}

real compute_ni(int c0, int ct, int c_flat) {
  if (c_flat <= 0) throw ContractError("flat coverage must be positive");
  if (c0 == c_flat) throw UndefinedNiError("NI is undefined when the initial coverage equals the flat coverage");
  return static_cast<real>(ct - c0) / static_cast<real>(c_flat - c0);
}

ScriptedAgent::ScriptedAgent(PolicyKind kind, PolicyParams params) : kind_(kind), params_(params) {}

std::string ScriptedAgent::name() const { return to_string(kind_); }

void ScriptedAgent::begin(const ClothEnv&, std::uint64_t seed) { seed_ = seed; }

PickPlaceAction ScriptedAgent::act(const ClothEnv& env, int step) {
  const PolicyInput in{env.state(), env.flat_state(), env.observation(),
                       default_depth_threshold(env.params().obs.z_max)};
  return policy_action(kind_, in, derive_seed(seed_, {static_cast<std::uint64_t>(step)}), params_);
}

LatentState filter_belief(const ModelParams<real>& params, const LatentState& prev, const PickPlaceAction& action,
                          const Observation& obs) {
  const mat a = action.as_vector();
  const mat x = model_input<real>(params.dims, obs);
  return posterior_step<real>(params, prev, a, x, mat::Zero(params.dims.stoch, 1));
}

PlannerAgent::PlannerAgent(std::shared_ptr<const ModelParams<real>> params, CemConfig config)
    : params_(std::move(params)), config_(std::move(config)) {
  config_.validate();
}

std::string PlannerAgent::name() const {
  return config_.mask_source == MaskSource::none ? "mpc-cem" : "clothmaskpick-" + to_string(config_.mask_source);
}

void PlannerAgent::begin(const ClothEnv& env, std::uint64_t seed) {
  seed_ = seed;
  belief_ = filter_belief(*params_, LatentState::zeros(params_->dims), PickPlaceAction{}, env.observation());
  last_ = {};
}

PickPlaceAction PlannerAgent::act(const ClothEnv& env, int step) {
  last_ = plan(*params_, belief_, env.observation(), config_, derive_seed(seed_, {static_cast<std::uint64_t>(step)}));
  return last_.action;
}

void PlannerAgent::observe(const PickPlaceAction& action, const Observation& next) {
  belief_ = filter_belief(*params_, belief_, action, next);
}

real EpisodeTrace::nc(int t) const { return compute_nc(coverage.at(static_cast<std::size_t>(t)), c_flat); }

real EpisodeTrace::ni(int t) const {
  if (coverage.front() == c_flat) return std::numeric_limits<real>::quiet_NaN();
  return compute_ni(coverage.front(), coverage.at(static_cast<std::size_t>(t)), c_flat);
}

bool EpisodeTrace::any_outside_mask() const {
  return std::any_of(outside_mask.begin(), outside_mask.end(), [](std::uint8_t v) { return v != 0; });
}

EpisodeTrace run_episode(Agent& agent, ClothEnv& env, std::uint64_t seed, std::optional<int> target_tier,
                         int max_steps) {
  ResetOptions opts;
  opts.target_tier = target_tier;
  env.reset(seed, opts);
  EpisodeTrace tr;
  tr.seed = seed;
  tr.target_tier = target_tier.value_or(-1);
  tr.tier = env.tier();
  tr.c_flat = env.c_flat();
  tr.coverage.push_back(env.coverage());
  agent.begin(env, seed);
  const int steps = std::min(max_steps, env.params().max_steps);
  const real threshold = default_depth_threshold(env.params().obs.z_max);
  const bool has_depth = env.observation().has(Channel::heightfield);
  auto* planner = dynamic_cast<PlannerAgent*>(&agent);
  for (int t = 0; t < steps; ++t) {
    try {
      const PickPlaceAction a = agent.act(env, t);
      bool outside = false;
      if (has_depth) outside = !mask_contains(extract_mask(env.observation(), threshold), a.clamped().pick());
      const StepResult r = env.step(a);
      tr.actions.push_back(r.info.action);
      tr.rewards.push_back(r.reward);
      tr.mispick.push_back(r.info.mispick ? 1 : 0);
      tr.outside_mask.push_back(outside ? 1 : 0);
      tr.coverage.push_back(r.info.coverage_after);
      if (planner) tr.predicted_rewards.push_back(planner->last_plan().predicted_reward);
      agent.observe(r.info.action, r.observation);
    } catch (const Error&) {
      rethrow_at_step(t);
    }
  }
  return tr;
}

EvalSpec EvalSpec::from_config(const Config& config) {
  EvalSpec s;
  s.episodes_per_tier = static_cast<int>(config.get_int("eval.episodes_per_tier"));
  s.seed = static_cast<std::uint64_t>(config.get_int("eval.seed"));
  s.record_steps.clear();
  for (const std::string& v : config.get_list("eval.record_steps")) s.record_steps.push_back(std::stoi(v));
  s.workers = config.get_bool("run.deterministic") ? 1 : static_cast<int>(config.get_int("run.workers"));
  if (s.episodes_per_tier < 1) throw ConfigError("eval.episodes_per_tier must be >= 1");
  for (const int k : s.record_steps)
    if (k < 0) throw ConfigError("eval.record_steps must be >= 0");
  return s;
}

std::uint64_t eval_episode_seed(std::uint64_t base, int tier, int i) {
  return derive_seed(base, {static_cast<std::uint64_t>(tier), static_cast<std::uint64_t>(i)});
}

std::vector<EpisodeTrace> evaluate(const AgentFactory& make_agent, const EnvParams& env_params, const EvalSpec& spec,
                                   const std::function<void(int, int)>& on_progress) {
  struct Job {
    int tier;
    int i;
  };
  std::vector<Job> jobs;
  for (const int tier : spec.tiers)
    for (int i = 0; i < spec.episodes_per_tier; ++i) jobs.push_back({tier, i});
  const int total = static_cast<int>(jobs.size());
  if (total == 0) throw ContractError("evaluation needs at least one episode");
  int max_record = 0;
  for (const int k : spec.record_steps) max_record = std::max(max_record, k);
  const int steps = std::max(max_record, 0);

  std::vector<EpisodeTrace> out(jobs.size());
  std::atomic<int> next{0}, done{0};
  std::mutex mutex;
  std::exception_ptr error;
  auto work = [&] {
    std::unique_ptr<Agent> agent = make_agent();
    ClothEnv env(env_params);
    for (int k = next++; k < total; k = next++) {
      const Job j = jobs[static_cast<std::size_t>(k)];
      try {
        out[static_cast<std::size_t>(k)] =
            run_episode(*agent, env, eval_episode_seed(spec.seed, j.tier, j.i), j.tier, steps);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!error) error = std::current_exception();
        next = total;
        return;
      }
      const int d = ++done;
      if (on_progress) {
        std::lock_guard lock(mutex);
        on_progress(d, total);
      }
    }
  };
  const int workers = std::max(1, std::min(spec.workers, total));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

const TierStats& TierReport::at(const std::string& tier, int step) const {
  for (const TierStats& r : rows)
    if (r.tier == tier && r.step == step) return r;
  throw ContractError("no report row for tier " + tier + " step " + std::to_string(step));
}

namespace {

TierStats pool_stats(const std::string& tier, int step, const std::vector<const EpisodeTrace*>& traces) {
  TierStats s;
  s.tier = tier;
  s.step = step;
  std::vector<real> nc, ni;
  for (const EpisodeTrace* t : traces) {
    const int k = std::min(step, t->steps());
    nc.push_back(t->nc(k));
    const real v = t->ni(k);
    if (!std::isnan(v)) ni.push_back(v);
  }
  auto moments = [](const std::vector<real>& v, real& mean, real& sd) {
    mean = sd = 0;
    if (v.empty()) return;
    for (const real x : v) mean += x;
    mean /= static_cast<real>(v.size());
    for (const real x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<real>(v.size()));
  };
  s.count = static_cast<int>(nc.size());
  s.ni_count = static_cast<int>(ni.size());
  moments(nc, s.nc_mean, s.nc_std);
  moments(ni, s.ni_mean, s.ni_std);
  return s;
}

} // namespace

TierReport tier_report(const std::vector<EpisodeTrace>& traces, const std::vector<int>& record_steps) {
  TierReport rep;
  for (int tier = 0; tier < kNumTiers; ++tier) {
    std::vector<const EpisodeTrace*> group;
    for (const EpisodeTrace& t : traces)
      if (t.tier == tier) group.push_back(&t);
    if (group.empty()) continue;
    for (const int k : record_steps) rep.rows.push_back(pool_stats(std::to_string(tier), k, group));
  }
  std::vector<const EpisodeTrace*> all;
  for (const EpisodeTrace& t : traces) all.push_back(&t);
  for (const int k : record_steps) rep.rows.push_back(pool_stats("all", k, all));
  return rep;
}

std::string tier_report_csv(const TierReport& report) {
  std::ostringstream out;
  out << "tier,step,count,nc_mean,nc_std,ni_count,ni_mean,ni_std\n";
  for (const TierStats& r : report.rows)
    out << r.tier << ',' << r.step << ',' << r.count << ',' << fmt(r.nc_mean) << ',' << fmt(r.nc_std) << ','
        << r.ni_count << ',' << fmt(r.ni_mean) << ',' << fmt(r.ni_std) << '\n';
  return out.str();
}

std::string tier_report_table(const TierReport& report) {
  std::ostringstream out;
  out << "tier  step   n   NC              NI\n";
  for (const TierStats& r : report.rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%-5s %4d %4d   %s +- %s   %s\n", r.tier.c_str(), r.step, r.count,
                  fixed(r.nc_mean, 2).c_str(), fixed(r.nc_std, 2).c_str(),
                  r.ni_count > 0 ? (fixed(r.ni_mean, 2) + " +- " + fixed(r.ni_std, 2)).c_str() : "n/a");
    out << line;
  }
  return out.str();
}

std::string traces_csv(const std::vector<EpisodeTrace>& traces) {
  std::ostringstream out;
  out << "episode,seed,target_tier,tier,step,coverage,c_flat,nc,ni,reward,mispick,outside_mask,predicted_reward,"
         "x_pick,y_pick,x_place,y_place\n";
  for (std::size_t e = 0; e < traces.size(); ++e) {
    const EpisodeTrace& t = traces[e];
    for (int k = 0; k <= t.steps(); ++k) {
      const auto ki = static_cast<std::size_t>(k);
      out << e << ',' << t.seed << ',' << t.target_tier << ',' << t.tier << ',' << k << ',' << t.coverage[ki] << ','
          << t.c_flat << ',' << fmt(t.nc(k)) << ',';
      const real ni = t.ni(k);
      out << (std::isnan(ni) ? std::string() : fmt(ni)) << ',';
      if (k == 0) {
        out << ",,,,,,,\n";
        continue;
      }
      const auto p = ki - 1;
      const PickPlaceAction& a = t.actions[p];
      out << fmt(t.rewards[p]) << ',' << int(t.mispick[p]) << ',' << int(t.outside_mask[p]) << ','
          << (p < t.predicted_rewards.size() ? fmt(t.predicted_rewards[p]) : std::string()) << ',' << fmt(a.x_pick)
          << ',' << fmt(a.y_pick) << ',' << fmt(a.x_place) << ',' << fmt(a.y_place) << '\n';
    }
  }
  return out.str();
}

real percentile(std::vector<real> samples, real q) {
  if (samples.empty()) throw ContractError("percentile of no samples");
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<real>(samples.size());
  const auto rank = static_cast<std::size_t>(std::max<real>(1, std::ceil(q / 100 * n)));
  return samples[std::min(rank, samples.size()) - 1];
}

BenchReport bench_inference(Agent& agent, ClothEnv& env, int warmup, int trials, std::uint64_t seed) {
  if (trials < 1 || warmup < 0) throw ContractError("benchmark needs trials >= 1 and warmup >= 0");
  env.reset(seed);
  agent.begin(env, seed);
  for (int i = 0; i < warmup; ++i) agent.act(env, i);
  std::vector<real> ms;
  for (int i = 0; i < trials; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    agent.act(env, warmup + i);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<real, std::milli>(t1 - t0).count());
  }
  BenchReport r;
  r.trials = trials;
  for (const real v : ms) r.mean_ms += v;
  r.mean_ms /= trials;
  r.p50_ms = percentile(ms, 50);
  r.p95_ms = percentile(ms, 95);
  return r;
}

std::string bench_report_csv(const BenchReport& r) {
  std::ostringstream out;
  out << "trials,mean_ms,p50_ms,p95_ms,transition_parameters,total_parameters,dataset_episodes\n";
  out << r.trials << ',' << fmt(r.mean_ms) << ',' << fmt(r.p50_ms) << ',' << fmt(r.p95_ms) << ','
      << r.transition_parameters << ',' << r.total_parameters << ',' << r.dataset_episodes << '\n';
  return out.str();
}

} // namespace clothpick
