#include "clothpick/datagen.hpp"

#include "clothpick/config.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace clothpick {

namespace {

vec2 xy(const ClothState& s, int i) { return s.positions.col(i).head<2>(); }

real clamp1(real v) { return std::clamp(v, real(-1), real(1)); }

PickPlaceAction make_action(const vec2& pick, const vec2& place) {
  return PickPlaceAction{pick.x(), pick.y(), place.x(), place.y()}.clamped();
}

vec2 uniform_box(Rng& rng, real half) { return {rng.uniform(-half, half), rng.uniform(-half, half)}; }

constexpr std::array<PolicyKind, 6> kMixKinds{PolicyKind::PureRandom,  PolicyKind::CornerBiased,
                                              PolicyKind::OracleFlatten, PolicyKind::OracleFold,
                                              PolicyKind::NoisyExpert, PolicyKind::SmallDrag};

} // namespace

PickPlaceAction pure_random_policy(Rng& rng) {
  const real a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), c = rng.uniform(-1, 1), d = rng.uniform(-1, 1);
  return {a, b, c, d};
}

PickPlaceAction corner_biased_policy(const PolicyInput& in, Rng& rng, real jitter) {
  const auto corners = in.state.corners();
  const vec2 corner = xy(in.state, corners[rng.index(4)]);
  const real jx = rng.normal(), jy = rng.normal();
  const vec2 pick = corner + jitter * vec2(jx, jy);
  const real px = rng.uniform(-1, 1), py = rng.uniform(-1, 1);
  return make_action(pick, vec2(px, py));
}

PickPlaceAction oracle_flatten_policy(const PolicyInput& in) {
  int best = -1;
  real best_d = -1;
  for (const int i : in.state.corners()) {
    const real d = (in.state.positions.col(i) - in.flat.positions.col(i)).norm();
    if (d > best_d) {
      best_d = d;
      best = i;
    }
  }
  return make_action(xy(in.state, best), xy(in.flat, best));
}

PickPlaceAction noisy_expert_policy(const PolicyInput& in, Rng& rng, real noise) {
  PickPlaceAction a = oracle_flatten_policy(in);
  const vec2 d = uniform_box(rng, noise);
  a.x_pick = clamp1(a.x_pick + d.x());
  a.y_pick = clamp1(a.y_pick + d.y());
  return a;
}

PickPlaceAction small_drag_policy(const PolicyInput& in, Rng& rng, real offset) {
  const Mask mask = extract_mask(in.observation, in.depth_threshold);
  std::vector<int> cells;
  for (std::size_t i = 0; i < mask.cells.size(); ++i)
    if (mask.cells[i]) cells.push_back(static_cast<int>(i));
  if (cells.empty()) return pure_random_policy(rng);
  const int res = mask.resolution;
  const real w = 2.0 / res;
  const int cell = cells[rng.index(cells.size())];
  const real u = rng.uniform(), v = rng.uniform();
  const vec2 pick(-1 + (cell % res + u) * w, -1 + (cell / res + v) * w);
  return make_action(pick, pick + uniform_box(rng, offset));
}

PickPlaceAction fold_policy(const PolicyInput& in, Rng& rng, FoldVariant variant, real noise) {
  const auto corners = in.state.corners();
  const int k = static_cast<int>(rng.index(4));
  const vec2 pick = xy(in.state, corners[static_cast<std::size_t>(k)]);
  vec2 place;
  if (rng.bernoulli(0.5)) {
    place = in.state.positions.rowwise().mean().head<2>();
  } else if (variant == FoldVariant::random) {
    const int other = (k + 1 + static_cast<int>(rng.index(3))) % 4;
    place = xy(in.state, corners[static_cast<std::size_t>(other)]);
  } else {
    place = xy(in.state, corners[static_cast<std::size_t>(3 - k)]);
  }
  if (variant == FoldVariant::noisy) {
    const vec2 dp = uniform_box(rng, noise);
    const vec2 dq = uniform_box(rng, noise);
    return make_action(pick + dp, place + dq);
  }
  return make_action(pick, place);
}

PolicyKind mix_choice(std::uint64_t seed) {
  Rng rng(seed);
  return kMixKinds[rng.index(kMixKinds.size())];
}

PickPlaceAction policy_action(PolicyKind kind, const PolicyInput& in, std::uint64_t seed, const PolicyParams& params) {
  Rng rng(seed);
  switch (kind) {
  case PolicyKind::PureRandom: return pure_random_policy(rng);
  case PolicyKind::CornerBiased: return corner_biased_policy(in, rng, params.corner_jitter);
  case PolicyKind::OracleFlatten: return oracle_flatten_policy(in);
  case PolicyKind::OracleFold: {
    const auto variant = static_cast<FoldVariant>(rng.index(3));
    return fold_policy(in, rng, variant, params.fold_noise);
  }
  case PolicyKind::NoisyExpert: return noisy_expert_policy(in, rng, params.expert_noise);
  case PolicyKind::SmallDrag: return small_drag_policy(in, rng, params.drag_offset);
  case PolicyKind::Mix: return policy_action(mix_choice(seed), in, derive_seed(seed, {1}), params);
  }
  throw ContractError("unknown policy kind");
}

KindWeights parse_kind_weights(const std::string& text) {
  KindWeights out;
  for (const std::string& item : split(text, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("expected Kind:weight, got '" + item + "'");
    const PolicyKind k = parse_policy_kind(trim(item.substr(0, colon)));
    for (const auto& [kk, w] : out)
      if (kk == k) throw ConfigError("policy kind '" + to_string(k) + "' listed twice");
    const std::string value = trim(item.substr(colon + 1));
    std::size_t used = 0;
    real w = 0;
    try {
      w = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || value.empty() || !(w >= 0) || !std::isfinite(w))
      throw ConfigError("bad weight '" + value + "' for " + to_string(k));
    out.emplace_back(k, w);
  }
  return out;
}

std::vector<int> apportion(const KindWeights& weights, int total) {
  real sum = 0;
  for (const auto& [k, w] : weights) sum += w;
  if (weights.empty() || !(sum > 0)) throw ContractError("apportionment needs a positive weight");
  std::vector<int> counts(weights.size());
  std::vector<real> rem(weights.size());
  int given = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const real q = weights[i].second / sum * total;
    // Guard against 0.3 * 1000 landing just below 300.
    counts[i] = static_cast<int>(std::floor(q + 1e-9));
    rem[i] = q - counts[i];
    given += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t j = 0; given < total; ++j, ++given) ++counts[order[j % order.size()]];
  return counts;
}

void MixtureSpec::validate() const {
  auto check = [](const KindWeights& w, int n, const char* name) {
    if (n < 0) throw ConfigError(std::string(name) + " episode count must be >= 0");
    if (n == 0) return;
    real sum = 0;
    for (const auto& [k, x] : w) sum += x;
    if (std::abs(sum - 1) > 1e-9) throw ConfigError(std::string(name) + " weights must sum to 1");
  };
  check(main_weights, main_episodes, "data.main");
  check(high_weights, high_episodes, "data.high");
  if (!(high_coverage_floor > 0 && high_coverage_floor < 1)) throw ConfigError("data.high_coverage_floor must be in (0, 1)");
}

MixtureSpec MixtureSpec::from_config(const Config& config) {
  MixtureSpec s;
  s.main_episodes = static_cast<int>(config.get_int("data.main_episodes"));
  s.main_weights = parse_kind_weights(config.get("data.main_weights"));
  s.high_episodes = static_cast<int>(config.get_int("data.high_episodes"));
  s.high_weights = parse_kind_weights(config.get("data.high_weights"));
  s.high_coverage_floor = config.get_double("data.high_coverage_floor");
  s.validate();
  return s;
}

std::vector<std::pair<PolicyKind, bool>> episode_plan(const MixtureSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<std::pair<PolicyKind, bool>> out;
  auto block = [&](const KindWeights& weights, int n, bool high) {
    if (n == 0) return;
    const std::vector<int> counts = apportion(weights, n);
    std::vector<PolicyKind> kinds;
    for (std::size_t i = 0; i < weights.size(); ++i) kinds.insert(kinds.end(), static_cast<std::size_t>(counts[i]), weights[i].first);
    // Shuffled so any prefix of the dataset keeps roughly the mixture.
    Rng rng(derive_seed(seed, {0x6b696e6473, high ? 1u : 0u}));
    for (std::size_t i = kinds.size(); i > 1; --i) std::swap(kinds[i - 1], kinds[rng.index(i)]);
    for (const PolicyKind k : kinds) out.emplace_back(k, high);
  };
  block(spec.main_weights, spec.main_episodes, false);
  block(spec.high_weights, spec.high_episodes, true);
  return out;
}

Episode generate_episode(const EnvParams& env_params, std::uint32_t index, PolicyKind kind, bool high_coverage,
                         real high_coverage_floor, std::uint64_t seed, const PolicyParams& policy) {
  const std::uint64_t ep_seed = derive_seed(seed, {index});
  ClothEnv env(env_params);
  Rng rng(derive_seed(ep_seed, {0}));
  ResetOptions opts;
  if (high_coverage) {
    const auto [lo, hi] = env_params.tier_folds[0];
    opts.folds = rng.integer(lo, hi);
    opts.min_nc = high_coverage_floor;
  } else {
    opts.target_tier = rng.integer(0, kNumTiers - 1);
  }
  Observation obs;
  try {
    obs = env.reset(derive_seed(ep_seed, {1}), opts);
  } catch (const GenerationError& e) {
    throw GenerationError("episode " + std::to_string(index) + ": " + e.what());
  }

  const int steps = env_params.max_steps;
  const int cells = obs.resolution * obs.resolution;
  const auto nch = static_cast<int>(obs.channels.size());
  Episode ep;
  ep.index = index;
  ep.kind = kind;
  ep.high_coverage = high_coverage;
  ep.tier = env.tier();
  ep.seed = ep_seed;
  ep.c_flat = env.c_flat();
  ep.coverage.push_back(env.coverage());
  ep.observations.resize(nch * cells, steps + 1);
  auto store = [&](const Observation& o, int t) {
    for (int k = 0; k < nch; ++k) ep.observations.col(t).segment(k * cells, cells) = o.data.row(k).transpose().cast<float>();
  };
  store(obs, 0);
  for (int t = 0; t < steps; ++t) {
    const PolicyInput in{env.state(), env.flat_state(), env.observation(),
                         default_depth_threshold(env_params.obs.z_max)};
    const PickPlaceAction a =
        policy_action(kind, in, derive_seed(ep_seed, {2, static_cast<std::uint64_t>(t)}), policy).clamped().float_rounded();
    StepResult r;
    try {
      r = env.step(a);
    } catch (const SimulationDivergence& e) {
      throw SimulationDivergence("episode " + std::to_string(index) + " step " + std::to_string(t) + ": " + e.what());
    }
    ep.actions.push_back(a);
    ep.rewards.push_back(static_cast<float>(r.reward));
    ep.mispick.push_back(r.info.mispick ? 1 : 0);
    ep.coverage.push_back(r.info.coverage_after);
    store(r.observation, t + 1);
  }
  return ep;
}

Manifest generate_dataset(const std::filesystem::path& path, const MixtureSpec& spec, const EnvParams& env_params,
                          std::uint64_t seed, const GenerateOptions& options) {
  const auto plan = episode_plan(spec, seed);
  const int total = static_cast<int>(plan.size());
  DatasetHeader header;
  header.episode_count = static_cast<std::uint32_t>(total);
  header.steps = env_params.max_steps;
  header.resolution = env_params.obs.resolution;
  header.channels = env_params.obs.channels;
  header.seed = seed;

  Manifest manifest;
  for (const auto& [k, high] : plan) ++(high ? manifest.high : manifest.main)[static_cast<std::size_t>(k)];

  DatasetWriter writer(path, header);
  auto make = [&](int i) {
    const auto& [kind, high] = plan[static_cast<std::size_t>(i)];
    return generate_episode(env_params, static_cast<std::uint32_t>(i), kind, high, spec.high_coverage_floor, seed,
                            options.policy);
  };

  const int workers = std::max(1, std::min(options.workers, total));
  if (workers == 1) {
    for (int i = 0; i < total; ++i) {
      writer.add(make(i));
      if (options.on_progress) options.on_progress(i + 1, total);
    }
    writer.finish();
    return manifest;
  }

  // Workers fill a bounded reorder buffer; this thread writes in index order.
  const int window = 4 * workers;
  std::mutex m;
  std::condition_variable cv;
  std::map<int, Episode> ready;
  int next = 0, written = 0;
  std::exception_ptr error;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int i;
        {
          std::unique_lock lock(m);
          cv.wait(lock, [&] { return error || next >= total || next < written + window; });
          if (error || next >= total) return;
          i = next++;
        }
        try {
          Episode ep = make(i);
          std::lock_guard lock(m);
          ready.emplace(i, std::move(ep));
        } catch (...) {
          std::lock_guard lock(m);
          if (!error) error = std::current_exception();
        }
        cv.notify_all();
      }
    });
  }
  {
    std::unique_lock lock(m);
    while (written < total) {
      cv.wait(lock, [&] { return error || ready.count(written); });
      if (error) break;
      Episode ep = std::move(ready.at(written));
      ready.erase(written);
      lock.unlock();
      writer.add(ep);
      lock.lock();
      ++written;
      cv.notify_all();
      if (options.on_progress) options.on_progress(written, total);
    }
  }
  cv.notify_all();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  writer.finish();
  return manifest;
}

std::string manifest_csv(const Manifest& manifest) {
  std::ostringstream out;
  out << "kind,count\n";
  for (int k = 0; k < kNumPolicyKinds; ++k) out << to_string(static_cast<PolicyKind>(k)) << ',' << manifest.main[static_cast<std::size_t>(k)] << '\n';
  for (int k = 0; k < kNumPolicyKinds; ++k)
    if (manifest.high[static_cast<std::size_t>(k)] > 0)
      out << "high:" << to_string(static_cast<PolicyKind>(k)) << ',' << manifest.high[static_cast<std::size_t>(k)] << '\n';
  return out.str();
}

} // namespace clothpick
