#include "clothpick/config.hpp"
#include "clothpick/datagen.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/eval.hpp"
#include "clothpick/experiments.hpp"
#include "clothpick/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace clothpick;

namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

EpisodeTrace synthetic(int tier, int c_flat, std::vector<int> coverage) {
  EpisodeTrace t;
  t.tier = tier;
  t.c_flat = c_flat;
  t.coverage = std::move(coverage);
  for (std::size_t i = 1; i < t.coverage.size(); ++i) {
    t.actions.emplace_back();
    t.rewards.push_back(0);
    t.mispick.push_back(0);
    t.outside_mask.push_back(0);
  }
  return t;
}

ModelDims small_dims() {
  ModelDims d;
  d.deter = 8;
  d.stoch = 4;
  d.hidden = 16;
  d.embed = 12;
  d.resolution = 32;
  d.input_channels = {Channel::heightfield};
  d.output_channels = {Channel::mask};
  return d;
}

Config tiny_config() {
  Config c = Config::defaults();
  c.set("model.deter", "8");
  c.set("model.stoch", "4");
  c.set("model.hidden", "16");
  c.set("model.embed", "12");
  c.set("train.steps", "4");
  c.set("train.checkpoint_every", "2");
  c.set("train.batch_size", "4");
  c.set("train.seq_len", "3");
  c.set("plan.population", "20");
  c.set("plan.iterations", "2");
  c.set("eval.episodes_per_tier", "1");
  c.set("eval.record_steps", "1,2");
  return c;
}

} // namespace

TEST_CASE("NC and NI identities") {
  CHECK(compute_nc(900, 900) == 1.0);
  for (const int c0 : {0, 100, 450, 899}) CHECK(compute_ni(c0, 900, 900) == 1.0);
  CHECK(std::abs(compute_ni(450, 675, 900) - 0.5) < 1e-12);
  CHECK(compute_ni(450, 300, 900) < 0);
  CHECK_THROWS_AS(compute_ni(900, 800, 900), UndefinedNiError);
  CHECK_THROWS_AS(compute_nc(1, 0), ContractError);
  CHECK(assign_tier(0.9764) == 0);
  CHECK(assign_tier(0.4088) == 3);
  CHECK(assign_tier(0.2839) == 4);
}

TEST_CASE("idle agent leaves the cloth where it is") {
  ClothEnv env(EnvParams{});
  IdleAgent idle;
  const EpisodeTrace t = run_episode(idle, env, 5, 0, 20);
  CHECK(t.steps() == 20);
  CHECK(t.tier == 0);
  for (int k = 0; k <= 20; ++k) CHECK(std::abs(t.nc(k) - t.nc(0)) < 0.01);
  for (const auto m : t.mispick) CHECK(m == 1);
}

TEST_CASE("oracle agent flattens tier-3 starts") {
  ClothEnv env(EnvParams{});
  ScriptedAgent oracle(PolicyKind::OracleFlatten);
  real sum = 0;
  for (int i = 0; i < 20; ++i) {
    const EpisodeTrace t = run_episode(oracle, env, eval_episode_seed(9, 3, i), 3, 20);
    CHECK(t.tier == 3);
    CHECK(t.tier == assign_tier(t.nc(0)));
    sum += t.ni(20);
  }
  MESSAGE("oracle mean NI at step 20: " << sum / 20);
  CHECK(sum / 20 > 0.5);
}

TEST_CASE("traces are reproducible and schedule independent") {
  ClothEnv env(EnvParams{});
  ScriptedAgent a(PolicyKind::NoisyExpert), b(PolicyKind::NoisyExpert);
  const EpisodeTrace t1 = run_episode(a, env, 77, 2, 6);
  const EpisodeTrace t2 = run_episode(b, env, 77, 2, 6);
  CHECK(traces_csv({t1}) == traces_csv({t2}));

  EvalSpec spec;
  spec.episodes_per_tier = 2;
  spec.record_steps = {2, 4};
  const AgentFactory make = [] { return std::make_unique<ScriptedAgent>(PolicyKind::Mix); };
  const auto serial = evaluate(make, EnvParams{}, spec);
  spec.workers = 3;
  const auto parallel = evaluate(make, EnvParams{}, spec);
  CHECK(serial.size() == 10);
  CHECK(traces_csv(serial) == traces_csv(parallel));
  for (const EpisodeTrace& t : serial) {
    CHECK(t.steps() == 4);
    CHECK(t.tier == t.target_tier);
  }
}

TEST_CASE("tier report statistics") {
  std::vector<EpisodeTrace> traces{synthetic(1, 100, {80, 90, 95}), synthetic(1, 100, {80, 90, 95}),
                                   synthetic(3, 200, {80, 100, 160}), synthetic(0, 100, {100, 100, 98}),
                                   synthetic(3, 200, {60, 130, 200})};
  const TierReport rep = tier_report(traces, {1, 2});
  // Identical traces: std 0, mean the value.
  const TierStats& t1 = rep.at("1", 2);
  CHECK(t1.count == 2);
  CHECK(t1.nc_mean == doctest::Approx(0.95));
  CHECK(t1.nc_std == 0);
  CHECK(t1.ni_mean == doctest::Approx(0.75));
  // Single episode: std 0; undefined NI is left out.
  const TierStats& t0 = rep.at("0", 2);
  CHECK(t0.count == 1);
  CHECK(t0.nc_std == 0);
  CHECK(t0.ni_count == 0);
  CHECK_THROWS_AS(rep.at("2", 1), ContractError);

  // "all" pools episodes rather than averaging tiers.
  for (const int k : {1, 2}) {
    std::vector<real> nc, ni;
    for (const auto& t : traces) {
      nc.push_back(static_cast<real>(t.coverage[static_cast<std::size_t>(k)]) / t.c_flat);
      if (t.coverage[0] != t.c_flat)
        ni.push_back(static_cast<real>(t.coverage[static_cast<std::size_t>(k)] - t.coverage[0]) / (t.c_flat - t.coverage[0]));
    }
    auto mean = [](const std::vector<real>& v) { real s = 0; for (real x : v) s += x; return s / static_cast<real>(v.size()); };
    auto sd = [&](const std::vector<real>& v) {
      const real m = mean(v);
      real s = 0;
      for (real x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<real>(v.size()));
    };
    const TierStats& all = rep.at("all", k);
    CHECK(all.count == 5);
    CHECK(std::abs(all.nc_mean - mean(nc)) < 1e-12);
    CHECK(std::abs(all.nc_std - sd(nc)) < 1e-12);
    CHECK(all.ni_count == 4);
    CHECK(std::abs(all.ni_mean - mean(ni)) < 1e-12);
    CHECK(std::abs(all.ni_std - sd(ni)) < 1e-12);
    int per_tier = 0;
    for (const TierStats& r : rep.rows)
      if (r.tier != "all" && r.step == k) per_tier += r.count;
    CHECK(per_tier == 5);
  }
  const std::string csv = tier_report_csv(rep);
  CHECK(csv.rfind("tier,step,count,nc_mean,nc_std,ni_count,ni_mean,ni_std\n", 0) == 0);
  CHECK(tier_report_table(rep).find("n/a") != std::string::npos);
}

TEST_CASE("percentiles and benchmark report") {
  CHECK(percentile({5.0}, 50) == 5.0);
  CHECK(percentile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 50) == 5);
  CHECK(percentile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 95) == 10);
  CHECK(percentile({3, 1, 2}, 0) == 1);

  auto params = std::make_shared<const ModelParams<real>>(ModelParams<real>::init(small_dims(), 2));
  CemConfig cfg;
  cfg.population = 30;
  cfg.iterations = 2;
  PlannerAgent agent(params, cfg);
  ClothEnv env(EnvParams{});
  const BenchReport one = bench_inference(agent, env, 0, 1, 3);
  CHECK(one.mean_ms == one.p50_ms);
  CHECK(one.p95_ms == one.p50_ms);
  CHECK(one.mean_ms > 0);
  const BenchReport many = bench_inference(agent, env, 1, 7, 3);
  CHECK(many.p95_ms >= many.p50_ms);
  CHECK(bench_report_csv(many).rfind("trials,mean_ms,p50_ms,p95_ms,transition_parameters,total_parameters,dataset_episodes\n", 0) == 0);
}

TEST_CASE("planner agent filters with the posterior mean and respects the mask") {
  auto params = std::make_shared<const ModelParams<real>>(ModelParams<real>::init(small_dims(), 4));
  CemConfig cfg;
  cfg.population = 30;
  cfg.iterations = 2;
  PlannerAgent agent(params, cfg);
  ClothEnv env(EnvParams{});
  const EpisodeTrace t = run_episode(agent, env, 21, 3, 4);
  CHECK(t.steps() == 4);
  CHECK(t.predicted_rewards.size() == 4);
  CHECK(!t.any_outside_mask());
  CHECK(agent.belief().z == agent.belief().mean);
  CHECK(agent.name() == "clothmaskpick-environment");

  const LatentState b = filter_belief(*params, LatentState::zeros(params->dims), PickPlaceAction{}, env.observation());
  const LatentState s = posterior_step(*params, LatentState::zeros(params->dims), PickPlaceAction{}, env.observation(), 5);
  CHECK(b.mean == s.mean);
  CHECK(b.h == s.h);
}

TEST_CASE("experiment preset registry") {
  CHECK(preset_names() == std::vector<std::string>{"reward_study", "ablation", "planner_sweep", "kl_study"});
  const Config base = Config::defaults();
  const auto ab = preset_runs("ablation", base);
  REQUIRE(ab.front().name == "full");
  CHECK(ab.front().config.hash() == base.hash());
  CHECK(ab.size() == 6);
  for (std::size_t i = 1; i < ab.size(); ++i) CHECK(ab[i].config.hash() != base.hash());
  CHECK(training_hash(ab[1].config) == training_hash(base));
  CHECK(training_hash(ab[2].config) != training_hash(base));
  const auto sweep = preset_runs("planner_sweep", base);
  CHECK(sweep[0].config.get("plan.horizon") == "1");
  CHECK(sweep[2].config.get("plan.horizon") == "3");
  CHECK_THROWS_AS(preset_runs("unknown", base), ConfigError);
  CHECK(diagnostics_csv_header() ==
        "run,step,posterior_obs_mse,prior_obs_mse,posterior_reward_mse,prior_reward_mse,kl,posterior_entropy,prior_entropy");
}

TEST_CASE("diagnostics of a zero model have closed forms") {
  ModelDims d = small_dims();
  const ModelParams<real> zero = ModelParams<real>::zeros(d);
  Rng rng(3);
  SequenceBatch<real> b;
  b.resolution = 32;
  b.channels = {Channel::heightfield, Channel::mask};
  const int B = 3, L = 4, cells = 32 * 32;
  real y2 = 0, r2 = 0;
  for (int t = 0; t < L; ++t) {
    mat o(2 * cells, B);
    for (Eigen::Index i = 0; i < o.size(); ++i) o(i) = rng.uniform(-0.5, 0.5);
    mat r(1, B);
    for (int j = 0; j < B; ++j) r(0, j) = t > 0 ? rng.uniform(-1, 1) : 0;
    y2 += o.bottomRows(cells).array().square().mean();
    if (t > 0) r2 += r.array().square().mean();
    b.obs.push_back(o);
    b.actions.push_back(t > 0 ? mat::Constant(4, B, 0.1) : mat::Zero(4, B));
    b.rewards.push_back(r);
  }
  b.seeds = {1, 2, 3};
  const Diagnostics g = diagnose(zero, b);
  CHECK(g.posterior_obs_mse == doctest::Approx(y2 / L).epsilon(1e-12));
  CHECK(g.prior_obs_mse == doctest::Approx((y2 - b.obs[0].bottomRows(cells).array().square().mean()) / (L - 1)).epsilon(1e-12));
  CHECK(g.prior_reward_mse == doctest::Approx(r2 / (L - 1)).epsilon(1e-12));
  CHECK(g.posterior_reward_mse == doctest::Approx(r2 / (L - 1)).epsilon(1e-12));
  CHECK(std::abs(g.kl) < 1e-15);
  const real h = d.stoch * (0.5 * std::log(2 * std::numbers::pi * std::numbers::e) + std::log(std::log(2.0) + d.min_std));
  CHECK(g.prior_entropy == doctest::Approx(h).epsilon(1e-12));
  CHECK(g.posterior_entropy == doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("reward relabelling and data prefixes") {
  MixtureSpec spec;
  spec.main_episodes = 4;
  spec.main_weights = parse_kind_weights("PureRandom:0.5,NoisyExpert:0.5");
  spec.high_episodes = 0;
  EnvParams ep;
  ep.max_steps = 3;
  const fs::path p = fs::temp_directory_path() / "clothpick_eval_relabel.cpds";
  generate_dataset(p, spec, ep, 8);
  const Dataset d = read_dataset(p);
  Dataset same = d;
  relabel_rewards(same, RewardParams{});
  CHECK(same == d);
  Dataset cov = d;
  RewardParams rc;
  rc.kind = RewardKind::coverage;
  relabel_rewards(cov, rc);
  for (const Episode& e : cov.episodes)
    for (int t = 0; t < e.steps(); ++t) CHECK(e.rewards[static_cast<std::size_t>(t)] == static_cast<float>(e.nc(t + 1)));
  const Dataset half = dataset_prefix(d, 0.5);
  CHECK(half.episodes.size() == 2);
  CHECK(half.header.episode_count == 2);
  CHECK_NOTHROW(half.validate());
  CHECK_THROWS_AS(dataset_prefix(d, 0.0), ConfigError);
  fs::remove(p);
}

TEST_CASE("preset pipeline smoke run") {
  MixtureSpec spec;
  spec.main_episodes = 4;
  spec.main_weights = parse_kind_weights("PureRandom:0.5,OracleFlatten:0.5");
  spec.high_episodes = 0;
  EnvParams ep;
  ep.max_steps = 3;
  const fs::path root = fs::temp_directory_path() / "clothpick_eval_pipeline";
  fs::remove_all(root);
  fs::create_directories(root);
  generate_dataset(root / "d.cpds", spec, ep, 2);
  const Dataset d = read_dataset(root / "d.cpds");
  const Config base = tiny_config();

  std::vector<std::string> log;
  PipelineOptions opt;
  opt.out_dir = root / "ablation";
  opt.only = {"full", "no_mask"};
  opt.log = [&](const std::string& m) { log.push_back(m); };
  const auto res = run_preset("ablation", base, d, opt);
  REQUIRE(res.size() == 2);
  CHECK(log.size() == 4);
  CHECK(log[2].find("reusing") != std::string::npos);
  CHECK(res[0].traces.size() == 5);
  CHECK(fs::exists(opt.out_dir / "full" / "tier_report.csv"));
  CHECK(fs::exists(opt.out_dir / "no_mask" / "traces.csv"));
  CHECK(Config::load(opt.out_dir / "no_mask" / "config.txt").get("plan.mask_source") == "none");
  const std::string summary = slurp(opt.out_dir / "ablation_summary.csv");
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 1 + 2 * 2);

  opt.out_dir = root / "kl";
  opt.only.clear();
  run_preset("kl_study", base, d, opt);
  const std::string diag = slurp(opt.out_dir / "kl_study_diagnostics.csv");
  CHECK(diag.rfind(diagnostics_csv_header() + "\n", 0) == 0);
  CHECK(std::count(diag.begin(), diag.end(), '\n') == 1 + 2 * 3);

  opt.out_dir = root / "bad";
  opt.only = {"nope"};
  CHECK_THROWS_AS(run_preset("ablation", base, d, opt), ConfigError);
  fs::remove_all(root);
}
