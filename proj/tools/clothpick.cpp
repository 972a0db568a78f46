#include "clothpick/config.hpp"
#include "clothpick/datagen.hpp"
#include "clothpick/dataset.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/eval.hpp"
#include "clothpick/experiments.hpp"
#include "clothpick/rng.hpp"
#include "clothpick/rssm.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

using namespace clothpick;
namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, usage = 2, format = 3, numeric = 4, other = 1 };

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool deterministic = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "key = value config file (default: $CLOTHPICK_CONFIG)");
  app->add_option("--set", c.sets, "key=value override, repeatable");
  app->add_option("--out", c.out, "output directory")->required();
  app->add_option("--seed", c.seed, "seed for this subcommand");
  app->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  app->add_flag("--deterministic", c.deterministic, "single worker, bitwise reproducible");
}

// Applies the lines of a config file on top of `cfg` (which may come from a
// checkpoint, so defaults must not be reapplied).
void apply_file(Config& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  Config::parse(text.str(), path.string());
  std::string line;
  std::istringstream lines(text.str());
  while (std::getline(lines, line)) {
    const std::string s = trim(line.substr(0, line.find('#')));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

Config resolve(const Common& c, Config base, const std::string& seed_key) {
  std::string path = c.config_path;
  if (path.empty())
    if (const char* env = std::getenv("CLOTHPICK_CONFIG")) path = env;
  if (!path.empty()) apply_file(base, path);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    base.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (c.seed) base.set(seed_key, std::to_string(*c.seed));
  if (c.workers) {
    base.set("run.workers", std::to_string(*c.workers));
    base.set("run.deterministic", "false");
  }
  if (c.deterministic) base.set("run.deterministic", "true");
  return base;
}

int workers_of(const Config& cfg) {
  return cfg.get_bool("run.deterministic") ? 1 : static_cast<int>(cfg.get_int("run.workers"));
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
  if (!out) throw ConfigError("cannot write " + p.string());
}

std::uint64_t file_fnv(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// outputs.csv: every file under out (recursively) with size and FNV-1a.
void write_outputs(const fs::path& out) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "outputs.csv") files.push_back(fs::relative(e.path(), out));
  std::sort(files.begin(), files.end());
  std::ostringstream s;
  s << "file,bytes,fnv1a\n";
  for (const fs::path& f : files) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(file_fnv(out / f)));
    s << f.generic_string() << ',' << fs::file_size(out / f) << ',' << hex << '\n';
  }
  write_text(out / "outputs.csv", s.str());
}

fs::path prepare(const Common& c, const Config& cfg) {
  const fs::path out = c.out;
  fs::create_directories(out);
  cfg.save(out / "config.txt");
  return out;
}

void progress(const char* what, int done, int total) {
  if (done == total || done % std::max(1, total / 20) == 0) std::cerr << what << ' ' << done << '/' << total << '\n';
}

std::pair<Config, std::shared_ptr<const ModelParams<real>>> load_model(const std::string& path) {
  auto [cfg, state] = read_checkpoint(path);
  return {cfg, std::make_shared<const ModelParams<real>>(std::move(state.params))};
}

// gen-data -------------------------------------------------------------------

struct GenArgs {
  Common c;
  std::optional<int> episodes;
};

int cmd_gen_data(const GenArgs& a) {
  Config cfg = resolve(a.c, Config::defaults(), "data.seed");
  if (a.episodes) {
    if (*a.episodes < 1) throw ConfigError("--episodes must be >= 1");
    // Keeps the main/high-coverage ratio of the configuration.
    const long long m = cfg.get_int("data.main_episodes"), h = cfg.get_int("data.high_episodes");
    if (m + h < 1) throw ConfigError("data.main_episodes + data.high_episodes must be >= 1");
    const auto split = apportion({{PolicyKind::Mix, static_cast<real>(m)}, {PolicyKind::Mix, static_cast<real>(h)}}, *a.episodes);
    cfg.set("data.main_episodes", std::to_string(split[0]));
    cfg.set("data.high_episodes", std::to_string(split[1]));
  }
  const fs::path out = prepare(a.c, cfg);
  GenerateOptions opt;
  opt.workers = workers_of(cfg);
  opt.on_progress = [](int d, int t) { progress("episodes", d, t); };
  const Manifest m = generate_dataset(out / "dataset.cpds", MixtureSpec::from_config(cfg), EnvParams::from_config(cfg),
                                      static_cast<std::uint64_t>(cfg.get_int("data.seed")), opt);
  const std::string csv = manifest_csv(m);
  write_text(out / "manifest.csv", csv);
  std::cout << csv;
  write_outputs(out);
  return ok;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  Common c;
  std::string data;
  std::optional<long> steps;
  std::optional<std::string> lr;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  std::optional<TrainState> resumed;
  Config base = Config::defaults();
  if (!a.resume.empty()) {
    auto [cfg, state] = read_checkpoint(a.resume);
    base = cfg;
    resumed = std::move(state);
  }
  Config cfg = resolve(a.c, base, "train.seed");
  if (a.steps) cfg.set("train.steps", std::to_string(*a.steps));
  if (a.lr) cfg.set("train.lr", *a.lr);
  if (resumed && training_hash(cfg) != training_hash(base)) {
    // Only the schedule may change on resume.
    Config probe = base;
    probe.set("train.steps", cfg.get("train.steps"));
    probe.set("train.lr", cfg.get("train.lr"));
    if (training_hash(probe) != training_hash(cfg))
      throw ConfigError("--resume: model, reward and training keys other than steps and lr must match the checkpoint");
  }
  const TrainConfig tc = TrainConfig::from_config(cfg);
  TrainState state = resumed ? std::move(*resumed)
                             : TrainState::fresh(ModelDims::from_config(cfg), tc.seed, cfg.get_double("model.init_scale"));
  if (state.step > tc.steps)
    throw ConfigError("checkpoint is at step " + std::to_string(state.step) + ", past train.steps");

  Dataset data = dataset_prefix(read_dataset(a.data), cfg.get_double("train.data_fraction"));
  relabel_rewards(data, RewardParams::from_config(cfg));

  const fs::path out = prepare(a.c, cfg);
  // On resume, keep logged rows up to the checkpoint step.
  std::string kept = loss_csv_header() + "\n";
  if (resumed && fs::exists(out / "loss.csv")) {
    std::ifstream prev(out / "loss.csv");
    std::string line;
    std::getline(prev, line);
    while (std::getline(prev, line))
      if (!line.empty() && std::stol(line.substr(0, line.find(','))) <= state.step) kept += line + "\n";
  }
  std::ofstream loss(out / "loss.csv", std::ios::trunc);
  loss << kept;
  TrainCallbacks cb;
  cb.on_log = [&](const LossRecord& r) {
    loss << loss_csv_row(r) << '\n';
    if (r.step % 100 == 0) std::cerr << "step " << r.step << " loss " << r.loss.total << '\n';
  };
  cb.on_checkpoint = [&](const TrainState& s) {
    write_checkpoint(out / ("checkpoint_" + std::to_string(s.step) + ".ckpt"), s, cfg);
  };
  train(state, data, tc, cb);
  loss.close();
  write_checkpoint(out / "model.ckpt", state, cfg);
  std::cout << "trained to step " << state.step << ", " << state.params.parameter_count() << " parameters\n";
  write_outputs(out);
  return ok;
}

// rollout --------------------------------------------------------------------

struct RolloutArgs {
  Common c;
  std::string checkpoint;
  std::string policy;
  int tier = 3;
  int seeds = 20;
  std::string mask_source;
  std::optional<int> horizon;
  std::optional<int> steps;
};

std::unique_ptr<Agent> make_agent(const std::string& policy, const std::shared_ptr<const ModelParams<real>>& params,
                                  const CemConfig& cem) {
  if (policy.empty()) return std::make_unique<PlannerAgent>(params, cem);
  if (policy == "idle") return std::make_unique<IdleAgent>();
  return std::make_unique<ScriptedAgent>(parse_policy_kind(policy));
}

int cmd_rollout(const RolloutArgs& a) {
  if (a.checkpoint.empty() == a.policy.empty()) throw ConfigError("rollout needs exactly one of --checkpoint, --policy");
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  std::shared_ptr<const ModelParams<real>> params;
  Config base = Config::defaults();
  if (!a.checkpoint.empty()) std::tie(base, params) = load_model(a.checkpoint);
  Config cfg = resolve(a.c, base, "eval.seed");
  if (!a.mask_source.empty()) cfg.set("plan.mask_source", a.mask_source);
  if (a.horizon) cfg.set("plan.horizon", std::to_string(*a.horizon));
  if (a.steps) cfg.set("env.max_steps", std::to_string(*a.steps));
  const CemConfig cem = CemConfig::from_config(cfg);

  EvalSpec spec = EvalSpec::from_config(cfg);
  spec.tiers = {a.tier};
  spec.episodes_per_tier = a.seeds;
  spec.record_steps = {static_cast<int>(cfg.get_int("env.max_steps"))};
  const fs::path out = prepare(a.c, cfg);
  const auto traces = evaluate([&] { return make_agent(a.policy, params, cem); }, EnvParams::from_config(cfg), spec,
                               [](int d, int t) { progress("episodes", d, t); });
  write_text(out / "traces.csv", traces_csv(traces));
  const TierReport rep = tier_report(traces, spec.record_steps);
  write_text(out / "tier_report.csv", tier_report_csv(rep));
  std::cout << tier_report_table(rep);
  write_outputs(out);
  return ok;
}

// eval -----------------------------------------------------------------------

struct EvalArgs {
  Common c;
  std::string checkpoint;
  std::string policy;
  std::string preset;
  std::string data;
  std::vector<std::string> only;
  std::optional<int> episodes;
};

int cmd_eval(const EvalArgs& a) {
  std::optional<std::pair<Config, std::shared_ptr<const ModelParams<real>>>> model;
  if (!a.checkpoint.empty()) model = load_model(a.checkpoint);
  Config cfg = resolve(a.c, model ? model->first : Config::defaults(), "eval.seed");
  if (a.episodes) cfg.set("eval.episodes_per_tier", std::to_string(*a.episodes));
  if (cfg.get_int("eval.episodes_per_tier") < 1) throw ConfigError("eval needs at least one episode per tier");

  if (!a.preset.empty()) {
    if (a.data.empty()) throw ConfigError("--preset needs --data for the runs it trains");
    if (!a.policy.empty()) throw ConfigError("--preset evaluates planners; drop --policy");
    preset_runs(a.preset, cfg);
    const fs::path out = prepare(a.c, cfg);
    PipelineOptions opt;
    opt.out_dir = out;
    opt.pretrained = model;
    opt.only = a.only;
    opt.log = [](const std::string& m) { std::cerr << m << '\n'; };
    const auto results = run_preset(a.preset, cfg, read_dataset(a.data), opt);
    for (const RunResult& r : results) std::cout << "== " << r.name << '\n' << tier_report_table(r.report);
    write_outputs(out);
    return ok;
  }

  if (a.checkpoint.empty() == a.policy.empty()) throw ConfigError("eval needs exactly one of --checkpoint, --policy");
  const CemConfig cem = CemConfig::from_config(cfg);
  const EvalSpec spec = EvalSpec::from_config(cfg);
  const fs::path out = prepare(a.c, cfg);
  const std::shared_ptr<const ModelParams<real>> params = model ? model->second : nullptr;
  const auto traces = evaluate([&] { return make_agent(a.policy, params, cem); }, EnvParams::from_config(cfg), spec,
                               [](int d, int t) { progress("episodes", d, t); });
  const TierReport rep = tier_report(traces, spec.record_steps);
  write_text(out / "tier_report.csv", tier_report_csv(rep));
  write_text(out / "traces.csv", traces_csv(traces));
  std::cout << tier_report_table(rep);
  write_outputs(out);
  return ok;
}

// bench ----------------------------------------------------------------------

struct BenchArgs {
  Common c;
  std::string checkpoint;
  std::string data;
  int trials = 20;
  int warmup = 2;
};

int cmd_bench(const BenchArgs& a) {
  if (a.trials < 1) throw ConfigError("--trials must be >= 1");
  auto [base, params] = load_model(a.checkpoint);
  const Config cfg = resolve(a.c, base, "eval.seed");
  const fs::path out = prepare(a.c, cfg);
  PlannerAgent agent(params, CemConfig::from_config(cfg));
  ClothEnv env(EnvParams::from_config(cfg));
  BenchReport r = bench_inference(agent, env, a.warmup, a.trials, static_cast<std::uint64_t>(cfg.get_int("eval.seed")));
  r.transition_parameters = params->transition_parameter_count();
  r.total_parameters = params->parameter_count();
  if (!a.data.empty()) r.dataset_episodes = read_dataset(a.data).episodes.size();
  const std::string csv = bench_report_csv(r);
  write_text(out / "bench.csv", csv);
  std::cout << csv;
  write_outputs(out);
  return ok;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cloth flattening with a masked latent-space planner"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a scripted-policy dataset");
  add_common(g, gen.c);
  g->add_option("--episodes", gen.episodes, "total episodes (main and high-coverage split kept)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the latent model");
  add_common(t, tr.c);
  t->add_option("--data", tr.data, "dataset file")->required()->check(CLI::ExistingFile);
  t->add_option("--steps", tr.steps, "total update steps");
  t->add_option("--lr", tr.lr, "learning rate");
  t->add_option("--resume", tr.resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  RolloutArgs ro;
  auto* r = app.add_subcommand("rollout", "run one agent on seeded episodes of a tier");
  add_common(r, ro.c);
  r->add_option("--checkpoint", ro.checkpoint, "model checkpoint (planner agent)")->check(CLI::ExistingFile);
  r->add_option("--policy", ro.policy, "scripted policy kind or 'idle' instead of a planner");
  r->add_option("--tier", ro.tier, "initial-state tier")->check(CLI::Range(0, 4));
  r->add_option("--seeds", ro.seeds, "number of episodes");
  r->add_option("--mask-source", ro.mask_source, "environment, model or none");
  r->add_option("--horizon", ro.horizon, "planning horizon");
  r->add_option("--steps", ro.steps, "steps per episode");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "tier report for an agent or an experiment preset");
  add_common(e, ev.c);
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  e->add_option("--policy", ev.policy, "scripted policy kind or 'idle'");
  e->add_option("--preset", ev.preset, "reward_study, ablation, planner_sweep or kl_study");
  e->add_option("--data", ev.data, "dataset for preset training")->check(CLI::ExistingFile);
  e->add_option("--only", ev.only, "subset of preset runs")->delimiter(',');
  e->add_option("--episodes", ev.episodes, "episodes per tier");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "planner inference latency");
  add_common(b, be.c);
  b->add_option("--checkpoint", be.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  b->add_option("--data", be.data, "dataset, for the episode count")->check(CLI::ExistingFile);
  b->add_option("--trials", be.trials, "timed plans");
  b->add_option("--warmup", be.warmup, "untimed plans");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? ok : usage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*r) return cmd_rollout(ro);
    if (*e) return cmd_eval(ev);
    if (*b) return cmd_bench(be);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return usage;
  } catch (const FormatError& err) {
    std::cerr << "format error: " << err.what() << '\n';
    return format;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return numeric;
  } catch (const SimulationDivergence& err) {
    std::cerr << "simulation diverged: " << err.what() << '\n';
    return numeric;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return numeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return other;
  }
  return usage;
}
