#include "clothpick/planner.hpp"

#include "clothpick/config.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/raster.hpp"
#include "clothpick/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

namespace clothpick {

namespace {

std::vector<int> elite_indices(const vec& scores, int count) {
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  order.resize(static_cast<std::size_t>(std::min<Eigen::Index>(count, scores.size())));
  return order;
}

CemDist fit(const mat& candidates, const std::vector<int>& elites, real std_floor) {
  const Eigen::Index D = candidates.rows();
  const auto n = static_cast<real>(elites.size());
  CemDist out{vec::Zero(D), vec::Zero(D)};
  for (const int i : elites) out.mean += candidates.col(i);
  out.mean /= n;
  for (const int i : elites) out.std += (candidates.col(i) - out.mean).cwiseAbs2();
  out.std = (out.std / n).cwiseSqrt().cwiseMax(std_floor);
  return out;
}

int cell_of(real v, int res) { return std::max(raster::cell_of(v, res), 0); }

std::vector<int> positive_cells(const Mask& mask) {
  std::vector<int> cells;
  for (std::size_t i = 0; i < mask.cells.size(); ++i)
    if (mask.cells[i]) cells.push_back(static_cast<int>(i));
  return cells;
}

// Closest point to `p` inside the nearest positive cell.
vec2 snap_into(const Mask& mask, const vec2& p) {
  const int res = mask.resolution;
  const real w = 2.0 / res;
  real best = std::numeric_limits<real>::infinity();
  vec2 out = p;
  for (const int i : positive_cells(mask)) {
    const int r = i / res, c = i % res;
    const real x0 = -1 + c * w, y0 = -1 + r * w;
    // Stay a hair inside the cell so the point maps back to it.
    const real m = 1e-6 * w;
    const vec2 q(std::clamp(p.x(), x0 + m, x0 + w - m), std::clamp(p.y(), y0 + m, y0 + w - m));
    const real d = (q - p).squaredNorm();
    if (d < best) {
      best = d;
      out = q;
    }
  }
  if (!mask_contains(mask, out)) {
    const int i = cell_of(out.y(), res) * res + cell_of(out.x(), res);
    out = vec2(-1 + (i % res + 0.5) * w, -1 + (i / res + 0.5) * w);
  }
  return out;
}

} // namespace

MaskSource parse_mask_source(const std::string& name) {
  if (name == "environment" || name == "env") return MaskSource::environment;
  if (name == "model") return MaskSource::model;
  if (name == "none") return MaskSource::none;
  throw ConfigError("unknown mask source '" + name + "' (environment, model, none)");
}

std::string to_string(MaskSource m) {
  switch (m) {
  case MaskSource::environment: return "environment";
  case MaskSource::model: return "model";
  case MaskSource::none: return "none";
  }
  return "?";
}

RewardHead parse_reward_head(const std::string& name) {
  if (name == "prior") return RewardHead::prior;
  if (name == "posterior") return RewardHead::posterior;
  throw ConfigError("unknown reward head '" + name + "' (prior, posterior)");
}

int CemConfig::elite_count() const {
  return std::max(1, static_cast<int>(std::ceil(population * elite_fraction - 1e-9)));
}

void CemConfig::validate() const {
  if (population < 1) throw ConfigError("plan.population must be >= 1");
  if (iterations < 1) throw ConfigError("plan.iterations must be >= 1");
  if (!(elite_fraction > 0 && elite_fraction <= 1)) throw ConfigError("plan.elite_fraction must be in (0, 1]");
  if (population * elite_fraction < 1 - 1e-9) throw ConfigError("plan.population * plan.elite_fraction must be >= 1");
  if (horizon < 1) throw ConfigError("plan.horizon must be >= 1");
  if (!(std_floor >= 0)) throw ConfigError("plan.std_floor must be >= 0");
  if (max_rejection_tries < 1) throw ConfigError("plan.max_rejection_tries must be >= 1");
  if (chunk < 1 || workers < 1) throw ConfigError("planner chunk and worker counts must be >= 1");
}

CemConfig CemConfig::from_config(const Config& config) {
  CemConfig c;
  c.population = static_cast<int>(config.get_int("plan.population"));
  c.iterations = static_cast<int>(config.get_int("plan.iterations"));
  c.elite_fraction = config.get_double("plan.elite_fraction");
  c.horizon = static_cast<int>(config.get_int("plan.horizon"));
  c.std_floor = config.get_double("plan.std_floor");
  c.mask_source = parse_mask_source(config.get("plan.mask_source"));
  c.max_rejection_tries = static_cast<int>(config.get_int("plan.max_rejection_tries"));
  c.reward_head = parse_reward_head(config.get("plan.reward_head"));
  c.depth_threshold = default_depth_threshold(config.get_double("obs.z_max"));
  c.validate();
  return c;
}

CemDist CemDist::initial(int horizon) {
  return {vec::Zero(kActionDim * horizon), vec::Ones(kActionDim * horizon)};
}

bool mask_contains(const Mask& mask, const vec2& p) {
  const int r = raster::cell_of(p.y(), mask.resolution), c = raster::cell_of(p.x(), mask.resolution);
  if (r < 0 || c < 0) return false;
  return mask.at(r, c);
}

mat sample_candidates(const CemDist& dist, const CemConfig& config, const Mask* mask, std::uint64_t seed,
                      SampleStats* stats) {
  const Eigen::Index D = dist.mean.size();
  if (D != kActionDim * config.horizon || dist.std.size() != D)
    throw ContractError("search distribution size does not match the horizon");
  std::vector<int> cells;
  if (mask) {
    cells = positive_cells(*mask);
    if (cells.empty()) throw PlanningError("cloth mask is empty; nothing to pick");
  }
  const int res = mask ? mask->resolution : 0;
  const real w = mask ? 2.0 / res : 0;
  mat out(D, config.population);
  SampleStats local;
  auto draw = [&](Rng& rng, Eigen::Index d) { return std::clamp(dist.mean(d) + dist.std(d) * rng.normal(), -1.0, 1.0); };
  for (int i = 0; i < config.population; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    for (Eigen::Index d = 0; d < D; ++d) out(d, i) = draw(rng, d);
    if (!mask) continue;
    bool inside = mask_contains(*mask, vec2(out(0, i), out(1, i)));
    for (int tries = 1; !inside && tries < config.max_rejection_tries; ++tries) {
      out(0, i) = draw(rng, 0);
      out(1, i) = draw(rng, 1);
      inside = mask_contains(*mask, vec2(out(0, i), out(1, i)));
    }
    if (inside) {
      ++local.accepted;
    } else {
      const int cell = cells[rng.index(cells.size())];
      out(0, i) = -1 + (cell % res + rng.uniform()) * w;
      out(1, i) = -1 + (cell / res + rng.uniform()) * w;
      ++local.fallback;
    }
  }
  if (stats) {
    stats->accepted += local.accepted;
    stats->fallback += local.fallback;
  }
  return out;
}

vec score_candidates(const ModelParams<real>& params, const LatentState& start, const mat& candidates,
                     const CemConfig& config, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(candidates.cols()));
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = derive_seed(seed, {static_cast<std::uint64_t>(i)});
  return score_candidates(params, start, candidates, config, seeds);
}

vec score_candidates(const ModelParams<real>& params, const LatentState& start, const mat& candidates,
                     const CemConfig& config, const std::vector<std::uint64_t>& seeds) {
  const int H = config.horizon;
  const auto N = candidates.cols();
  if (candidates.rows() != kActionDim * H) throw ContractError("candidate rows do not match the horizon");
  if (static_cast<Eigen::Index>(seeds.size()) != N) throw ContractError("one noise seed per candidate is required");
  if (start.size() != 1) throw ContractError("scoring starts from a single latent state");
  const int Z = params.dims.stoch;
  vec scores(N);
  const Eigen::Index chunks = (N + config.chunk - 1) / config.chunk;

  // Blocks are padded to whole GEMM panels so that every candidate takes the
  // same kernel path and its score does not depend on its column.
  constexpr int kPanel = 16;
  auto rollout = [&](Eigen::Index c0, int n) {
    const int np = (n + kPanel - 1) / kPanel * kPanel;
    LatentState lat{start.h.replicate(1, np), start.mean.replicate(1, np), start.std.replicate(1, np),
                    start.z.replicate(1, np)};
    mat total = mat::Zero(1, np);
    mat actions = mat::Zero(kActionDim, np);
    for (int s = 0; s < H; ++s) {
      mat noise = mat::Zero(Z, np);
      for (int j = 0; j < n; ++j) {
        Rng rng(derive_seed(seeds[static_cast<std::size_t>(c0 + j)], {static_cast<std::uint64_t>(s)}));
        for (int i = 0; i < Z; ++i) noise(i, j) = rng.normal();
      }
      actions.leftCols(n) = candidates.block(kActionDim * s, c0, kActionDim, n);
      lat = prior_step<real>(params, lat, actions, noise);
      total += config.reward_head == RewardHead::prior ? predict_reward_prior<real>(params, lat)
                                                       : predict_reward_posterior<real>(params, lat);
    }
    return mat(total.leftCols(n));
  };

  auto run_chunk = [&](Eigen::Index k) {
    const Eigen::Index c0 = k * config.chunk;
    const auto n = static_cast<int>(std::min<Eigen::Index>(config.chunk, N - c0));
    try {
      scores.segment(c0, n) = rollout(c0, n).transpose();
    } catch (const NumericError&) {
      // Rerun one by one to name the offending candidate.
      for (int j = 0; j < n; ++j) {
        try {
          rollout(c0 + j, 1);
        } catch (const NumericError& e) {
          throw NumericError("candidate " + std::to_string(c0 + j) + ": " + e.what());
        }
      }
      throw;
    }
  };

  const int workers = static_cast<int>(std::min<Eigen::Index>(config.workers, chunks));
  if (workers <= 1) {
    for (Eigen::Index k = 0; k < chunks; ++k) run_chunk(k);
  } else {
    std::atomic<Eigen::Index> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (Eigen::Index k = next++; k < chunks; k = next++) {
          try {
            run_chunk(k);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }
  return scores;
}

CemDist refit(const CemDist& dist, const mat& candidates, const vec& scores, real elite_fraction, real std_floor) {
  if (candidates.cols() != scores.size() || candidates.rows() != dist.mean.size())
    throw ContractError("refit shapes do not match");
  if (!scores.allFinite()) throw ContractError("refit needs finite scores");
  const int count = std::max(1, static_cast<int>(std::ceil(static_cast<real>(scores.size()) * elite_fraction - 1e-9)));
  return fit(candidates, elite_indices(scores, count), std_floor);
}

PlanResult cem_optimize(const ScoreFn& score, const CemConfig& config, const Mask* mask, std::uint64_t seed) {
  config.validate();
  CemDist dist = CemDist::initial(config.horizon);
  const int n_elite = config.elite_count();
  mat elites(dist.mean.size(), 0);
  vec elite_scores(0);
  SampleStats stats;
  PlanResult out;
  for (int it = 0; it < config.iterations; ++it) {
    const auto iu = static_cast<std::uint64_t>(it);
    const mat cand = sample_candidates(dist, config, mask, derive_seed(seed, {iu, 0}), &stats);
    const vec s = score(cand, derive_seed(seed, {iu, 1}));
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (!std::isfinite(s(i))) throw NumericError("non-finite score for candidate " + std::to_string(i));
    mat pool(cand.rows(), cand.cols() + elites.cols());
    pool << cand, elites;
    vec pool_scores(s.size() + elite_scores.size());
    pool_scores << s, elite_scores;
    const std::vector<int> idx = elite_indices(pool_scores, n_elite);
    dist = fit(pool, idx, config.std_floor);
    elites.resize(pool.rows(), static_cast<Eigen::Index>(idx.size()));
    elite_scores.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      elites.col(static_cast<Eigen::Index>(k)) = pool.col(idx[k]);
      elite_scores(static_cast<Eigen::Index>(k)) = pool_scores(idx[k]);
    }
    out.best_elite.push_back(elite_scores(0));
    out.iterations_run = it + 1;
  }
  vec chosen = dist.mean.cwiseMax(-1.0).cwiseMin(1.0);
  if (mask && !mask_contains(*mask, chosen.head<2>())) chosen.head<2>() = snap_into(*mask, chosen.head<2>());
  out.action = PickPlaceAction::from_vector(chosen.head<4>());
  out.predicted_reward = score(chosen, derive_seed(seed, {static_cast<std::uint64_t>(config.iterations), 1}))(0);
  const int drawn = stats.accepted + stats.fallback;
  out.mask_hit_rate = drawn > 0 ? static_cast<real>(stats.accepted) / drawn : 1.0;
  return out;
}

std::optional<Mask> planning_mask(const ModelParams<real>& params, const LatentState& posterior,
                                  const Observation& obs, const CemConfig& config) {
  std::optional<Mask> mask;
  switch (config.mask_source) {
  case MaskSource::none: return mask;
  case MaskSource::environment: mask = extract_mask(obs, config.depth_threshold); break;
  case MaskSource::model: mask = predict_mask(params, posterior); break;
  }
  if (mask->count() == 0)
    throw PlanningError(std::string("empty cloth mask from the ") + (config.mask_source == MaskSource::model ? "model" : "environment"));
  return mask;
}

PlanResult plan(const ModelParams<real>& params, const LatentState& posterior, const Observation& obs,
                const CemConfig& config, std::uint64_t seed) {
  const std::optional<Mask> mask = planning_mask(params, posterior, obs, config);
  const ScoreFn score = [&](const mat& cand, std::uint64_t s) { return score_candidates(params, posterior, cand, config, s); };
  return cem_optimize(score, config, mask ? &*mask : nullptr, seed);
}

} // namespace clothpick
