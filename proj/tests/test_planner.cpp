#include "clothpick/config.hpp"
#include "clothpick/env.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/planner.hpp"
#include "clothpick/rng.hpp"
#include "clothpick/rssm.hpp"

#include <doctest.h>

#include <cmath>

using namespace clothpick;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.deter = 8;
  d.stoch = 4;
  d.hidden = 16;
  d.embed = 12;
  d.resolution = 32;
  d.input_channels = {Channel::heightfield, Channel::mask};
  d.output_channels = {Channel::mask};
  return d;
}

Mask empty_mask(int res) { return {res, std::vector<std::uint8_t>(static_cast<std::size_t>(res * res), 0)}; }

Mask full_mask(int res) { return {res, std::vector<std::uint8_t>(static_cast<std::size_t>(res * res), 1)}; }

LatentState some_latent(const ModelParams<real>& params, std::uint64_t seed) {
  LatentState lat = LatentState::zeros(params.dims);
  return prior_step(params, lat, PickPlaceAction{0.1, -0.2, 0.3, 0.4}, seed);
}

CemConfig small_cem() {
  CemConfig c;
  c.population = 40;
  c.iterations = 3;
  c.elite_fraction = 0.1;
  return c;
}

} // namespace

TEST_CASE("single-cell mask keeps every first pick in that cell") {
  Mask m = empty_mask(8);
  const int r = 2, c = 5;
  m.cells[r * 8 + c] = 1;
  CemConfig cfg = small_cem();
  cfg.population = 300;
  cfg.horizon = 2;
  SampleStats stats;
  const mat x = sample_candidates(CemDist::initial(2), cfg, &m, 11, &stats);
  const real w = 0.25;
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    CHECK(x(0, i) >= -1 + c * w);
    CHECK(x(0, i) < -1 + (c + 1) * w);
    CHECK(x(1, i) >= -1 + r * w);
    CHECK(x(1, i) < -1 + (r + 1) * w);
    CHECK(mask_contains(m, vec2(x(0, i), x(1, i))));
  }
  CHECK(stats.accepted + stats.fallback == 300);
  CHECK(stats.fallback > 0);
  CHECK(x.cwiseAbs().maxCoeff() <= 1.0);
}

TEST_CASE("unmasked sampling matches the search distribution") {
  CemConfig cfg;
  cfg.population = 100000;
  CemDist dist{vec4(0.1, -0.2, 0.3, 0.0), vec4(0.1, 0.15, 0.05, 0.2)};
  const mat x = sample_candidates(dist, cfg, nullptr, 5);
  const real n = static_cast<real>(x.cols());
  for (int d = 0; d < 4; ++d) {
    const real mean = x.row(d).mean();
    CHECK(std::abs(mean - dist.mean(d)) < 3 * dist.std(d) / std::sqrt(n));
    const real var = (x.row(d).array() - mean).square().sum() / (n - 1);
    CHECK(std::sqrt(var) == doctest::Approx(dist.std(d)).epsilon(0.02));
  }
}

TEST_CASE("all-ones mask is the same as no mask") {
  CemConfig cfg = small_cem();
  cfg.population = 500;
  cfg.horizon = 3;
  const Mask ones = full_mask(32);
  const CemDist dist = CemDist::initial(3);
  SampleStats stats;
  const mat a = sample_candidates(dist, cfg, &ones, 9, &stats);
  const mat b = sample_candidates(dist, cfg, nullptr, 9);
  CHECK(a == b);
  CHECK(stats.accepted == 500);
  CHECK(stats.fallback == 0);
}

TEST_CASE("empty masks are planning errors") {
  CemConfig cfg = small_cem();
  const Mask none = empty_mask(8);
  CHECK_THROWS_AS(sample_candidates(CemDist::initial(1), cfg, &none, 1), PlanningError);

  const ModelParams<real> params = ModelParams<real>::init(small_dims(), 3);
  Observation obs{32, {Channel::heightfield, Channel::mask}, mat::Constant(2, 32 * 32, -0.5)};
  CHECK_THROWS_AS(plan(params, LatentState::zeros(params.dims), obs, cfg, 1), PlanningError);
}

TEST_CASE("refit tie rule and degenerate elite set") {
  Rng rng(4);
  mat cand(4, 10);
  for (Eigen::Index i = 0; i < cand.size(); ++i) cand(i) = rng.uniform(-1, 1);
  const CemDist dist = CemDist::initial(1);

  const CemDist tie = refit(dist, cand, vec::Constant(10, 2.0), 0.3, 1e-3);
  const vec mean = cand.leftCols(3).rowwise().mean();
  CHECK((tie.mean - mean).cwiseAbs().maxCoeff() < 1e-15);
  for (int d = 0; d < 4; ++d) {
    const real var = (cand.row(d).head(3).array() - mean(d)).square().sum() / 3;
    CHECK(tie.std(d) == doctest::Approx(std::max(std::sqrt(var), 1e-3)).epsilon(1e-12));
  }

  vec scores = vec::LinSpaced(10, 0, 1);
  scores(6) = 5;
  const CemDist one = refit(dist, cand, scores, 0.1, 1e-3);
  CHECK(one.mean == vec(cand.col(6)));
  CHECK(one.std == vec::Constant(4, 1e-3));

  vec bad = scores;
  bad(2) = std::nan("");
  CHECK_THROWS_AS(refit(dist, cand, bad, 0.1, 1e-3), ContractError);
}

TEST_CASE("CEM finds the peak of a concave quadratic") {
  Rng rng(2024);
  CemConfig cfg;
  cfg.population = 500;
  cfg.iterations = 30;
  cfg.mask_source = MaskSource::none;
  for (int trial = 0; trial < 10; ++trial) {
    vec4 target;
    for (int d = 0; d < 4; ++d) target(d) = rng.uniform(-0.5, 0.5);
    const ScoreFn f = [&](const mat& x, std::uint64_t) {
      return vec(-(x.colwise() - vec(target)).colwise().squaredNorm().transpose());
    };
    const PlanResult r = cem_optimize(f, cfg, nullptr, 100 + static_cast<std::uint64_t>(trial));
    CHECK((r.action.as_vector() - target).cwiseAbs().maxCoeff() < 1e-2);
    CHECK(r.iterations_run == 30);
    REQUIRE(r.best_elite.size() == 30);
    for (std::size_t i = 1; i < r.best_elite.size(); ++i) CHECK(r.best_elite[i] >= r.best_elite[i - 1]);
    CHECK(r.predicted_reward == doctest::Approx(-(r.action.as_vector() - target).squaredNorm()));
    CHECK(r.mask_hit_rate == 1.0);
  }
}

TEST_CASE("one sample and one iteration returns that sample") {
  CemConfig cfg;
  cfg.population = 1;
  cfg.iterations = 1;
  cfg.elite_fraction = 1;
  cfg.mask_source = MaskSource::none;
  const ScoreFn f = [](const mat& x, std::uint64_t) { return vec(x.row(0).transpose()); };
  const PlanResult r = cem_optimize(f, cfg, nullptr, 77);
  const mat x = sample_candidates(CemDist::initial(1), cfg, nullptr, derive_seed(77, {0, 0}));
  CHECK(r.action.as_vector() == vec4(x.col(0)));

  cfg.elite_fraction = 0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("returned pick is snapped into a non-convex mask") {
  Mask m = empty_mask(8);
  m.cells[0] = 1;
  m.cells[63] = 1;
  CemConfig cfg = small_cem();
  cfg.population = 200;
  cfg.iterations = 2;
  cfg.elite_fraction = 0.5;
  // Flat scores keep elites in both corners, so the mean falls between them.
  const ScoreFn f = [](const mat& x, std::uint64_t) { return vec(vec::Zero(x.cols())); };
  const PlanResult r = cem_optimize(f, cfg, &m, 3);
  CHECK(mask_contains(m, r.action.pick()));
  CHECK(r.action.max_abs() <= 1.0);
}

TEST_CASE("horizon scores are summed prior rewards of the single-step rollout") {
  const ModelParams<real> params = ModelParams<real>::init(small_dims(), 8);
  const LatentState start = some_latent(params, 12);
  Rng rng(1);
  for (const int H : {1, 3}) {
    CemConfig cfg = small_cem();
    cfg.horizon = H;
    mat cand(4 * H, 20);
    for (Eigen::Index i = 0; i < cand.size(); ++i) cand(i) = rng.uniform(-1, 1);
    const vec s = score_candidates(params, start, cand, cfg, 55);
    for (int i = 0; i < 20; ++i) {
      const std::uint64_t cs = derive_seed(55, {static_cast<std::uint64_t>(i)});
      LatentState lat = start;
      real expect = 0;
      for (int k = 0; k < H; ++k) {
        lat = prior_step(params, lat, PickPlaceAction::from_vector(vec4(cand.block(4 * k, i, 4, 1))),
                         derive_seed(cs, {static_cast<std::uint64_t>(k)}));
        expect += predict_reward_prior(params, lat);
      }
      CHECK(s(i) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("posterior reward head scores with the posterior head") {
  const ModelParams<real> params = ModelParams<real>::init(small_dims(), 8);
  const LatentState start = some_latent(params, 12);
  CemConfig cfg = small_cem();
  cfg.reward_head = RewardHead::posterior;
  const mat cand = mat::Constant(4, 1, 0.2);
  const vec s = score_candidates(params, start, cand, cfg, 3);
  const LatentState lat =
      prior_step(params, start, PickPlaceAction::from_vector(cand.col(0)), derive_seed(derive_seed(3, {0}), {0}));
  CHECK(s(0) == doctest::Approx(predict_reward_posterior<real>(params, lat)(0)).epsilon(1e-12));
}

TEST_CASE("scoring is deterministic and independent of the worker count") {
  const ModelParams<real> params = ModelParams<real>::init(small_dims(), 8);
  const LatentState start = some_latent(params, 12);
  CemConfig cfg = small_cem();
  cfg.horizon = 2;
  Rng rng(6);
  mat cand(8, 700);
  for (Eigen::Index i = 0; i < cand.size(); ++i) cand(i) = rng.uniform(-1, 1);

  const vec serial = score_candidates(params, start, cand, cfg, 21);
  for (const int workers : {2, 3, 8}) {
    CemConfig par = cfg;
    par.workers = workers;
    CHECK(score_candidates(params, start, cand, par, 21) == serial);
  }

  mat dup(8, 6);
  for (int j = 0; j < 6; ++j) dup.col(j) = cand.col(0);
  const vec d = score_candidates(params, start, dup, cfg, std::vector<std::uint64_t>(6, 99));
  for (int j = 1; j < 6; ++j) CHECK(d(j) == d(0));

  // A candidate's score does not depend on its column or chunk.
  std::vector<std::uint64_t> seeds(700);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = derive_seed(21, {i});
  const vec base = score_candidates(params, start, cand, cfg, seeds);
  mat rev = cand.rowwise().reverse();
  std::vector<std::uint64_t> rev_seeds(seeds.rbegin(), seeds.rend());
  CemConfig small = cfg;
  small.chunk = 37;
  CHECK(vec(score_candidates(params, start, rev, small, rev_seeds).reverse()) == base);
}

TEST_CASE("environment-masked plans pick on the cloth") {
  const ModelParams<real> params = ModelParams<real>::init(small_dims(), 8);
  ClothEnv env(EnvParams{});
  CemConfig cfg = small_cem();
  cfg.population = 60;
  cfg.iterations = 4;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const Observation obs = env.reset(300 + seed);
    const LatentState post = posterior_step(params, LatentState::zeros(params.dims), PickPlaceAction{}, obs, seed);
    const PlanResult r = plan(params, post, obs, cfg, seed);
    const Mask m = extract_mask(obs, cfg.depth_threshold);
    CHECK(mask_contains(m, r.action.pick()));
    CHECK(r.action.max_abs() <= 1.0);
    CHECK(r.mask_hit_rate > 0);
    CHECK(r.mask_hit_rate <= 1);
  }
}

TEST_CASE("planner config from the defaults") {
  const CemConfig c = CemConfig::from_config(Config::defaults());
  CHECK(c.population == 500);
  CHECK(c.iterations == 20);
  CHECK(c.elite_count() == 50);
  CHECK(c.horizon == 1);
  CHECK(c.mask_source == MaskSource::environment);
  CHECK(c.reward_head == RewardHead::prior);
  Config bad = Config::defaults();
  bad.set("plan.mask_source", "sometimes");
  CHECK_THROWS_AS(CemConfig::from_config(bad), ConfigError);
  bad = Config::defaults();
  bad.set("plan.horizon", "0");
  CHECK_THROWS_AS(CemConfig::from_config(bad), ConfigError);
  CHECK(parse_mask_source(to_string(MaskSource::model)) == MaskSource::model);
}
