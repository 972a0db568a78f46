#include "clothpick/config.hpp"
#include "clothpick/dataset.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/rng.hpp"
#include "clothpick/rssm.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace clothpick;

namespace {

ModelDims tiny_dims() {
  ModelDims d;
  d.deter = 8;
  d.stoch = 4;
  d.hidden = 12;
  d.embed = 10;
  d.resolution = 8;
  d.input_channels = {Channel::heightfield, Channel::mask};
  d.output_channels = {Channel::mask, Channel::heightfield};
  return d;
}

SequenceBatch<real> random_batch(const ModelDims& d, int B, int L, std::uint64_t seed) {
  Rng rng(seed);
  SequenceBatch<real> b;
  b.resolution = d.resolution;
  b.channels = {Channel::heightfield, Channel::mask};
  const int rows = 2 * d.resolution * d.resolution;
  for (int t = 0; t < L; ++t) {
    mat o(rows, B), a = mat::Zero(4, B), r = mat::Zero(1, B);
    for (Eigen::Index i = 0; i < o.size(); ++i) o(i) = rng.uniform(-0.5, 0.5);
    if (t > 0) {
      for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.uniform(-1, 1);
      for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = rng.uniform(-1, 1);
    }
    b.obs.push_back(o);
    b.actions.push_back(a);
    b.rewards.push_back(r);
  }
  for (int j = 0; j < B; ++j) b.seeds.push_back(rng.next());
  return b;
}

// Straightforward per-sequence forward pass, written independently of the
// batched implementation.
struct Reference {
  static vec mlp(const Mlp<real>& m, vec a) {
    for (std::size_t l = 0; l < m.size(); ++l) {
      vec pre = m[l].w * a + m[l].b.col(0);
      if (l + 1 < m.size())
        for (Eigen::Index i = 0; i < pre.size(); ++i) pre(i) = pre(i) > 0 ? pre(i) : std::exp(pre(i)) - 1;
      a = pre;
    }
    return a;
  }
  static real sig(real x) { return 1 / (1 + std::exp(-x)); }
  static vec gru(const Gru<real>& g, const vec& h, const vec& in) {
    const Eigen::Index H = h.size();
    const vec gx = g.wx * in + g.bx.col(0);
    const vec gh = g.wh * h + g.bh.col(0);
    vec out(H);
    for (Eigen::Index i = 0; i < H; ++i) {
      const real r = sig(gx(i) + gh(i));
      const real u = sig(gx(H + i) + gh(H + i));
      const real n = std::tanh(gx(2 * H + i) + r * gh(2 * H + i));
      out(i) = (1 - u) * n + u * h(i);
    }
    return out;
  }
  static void stats(const vec& o, int Z, real min_std, vec& m, vec& s) {
    m = o.head(Z);
    s.resize(Z);
    for (int i = 0; i < Z; ++i) s(i) = std::log(1 + std::exp(o(Z + i))) + min_std;
  }
  static real kl(const vec& mq, const vec& sq, const vec& mp, const vec& sp) {
    real k = 0;
    for (Eigen::Index i = 0; i < mq.size(); ++i)
      k += std::log(sp(i) / sq(i)) + (sq(i) * sq(i) + (mq(i) - mp(i)) * (mq(i) - mp(i))) / (2 * sp(i) * sp(i)) - 0.5;
    return k;
  }
  static vec cat(const vec& a, const vec& b) {
    vec o(a.size() + b.size());
    o << a, b;
    return o;
  }

  struct Frozen {
    std::vector<std::vector<vec>> z, mq, sq, mp, sp; // [b][t]
  };

  // Loss with the KL term split into a prior-side part (posterior frozen,
  // recurrence fed frozen samples) and a posterior-side part (prior frozen).
  // Without `frozen`, both parts use live values: the true loss.
  static real loss(const ModelParams<real>& p, const SequenceBatch<real>& batch, const LossConfig& cfg,
                   const Frozen* frozen, Frozen* record) {
    const ModelDims& d = p.dims;
    const int L = batch.length(), B = batch.batch(), Z = d.stoch;
    const int cells = d.resolution * d.resolution;
    const real alpha = cfg.kl_balancing ? cfg.alpha : 0.5;
    real obs = 0, rew = 0, prew = 0, klsum = 0;
    if (record) {
      record->z.assign(static_cast<std::size_t>(B), {});
      record->mq = record->sq = record->mp = record->sp = record->z;
    }
    for (int b = 0; b < B; ++b) {
      const auto [nq, np] = sequence_noise<real>(batch.seeds[static_cast<std::size_t>(b)], Z, L);
      vec h = vec::Zero(d.deter), z = vec::Zero(Z), hA = vec::Zero(d.deter);
      for (int t = 0; t < L; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        const vec a = batch.actions[ti].col(b);
        const vec zprev_frozen = frozen ? (t == 0 ? vec(vec::Zero(Z)) : frozen->z[static_cast<std::size_t>(b)][ti - 1]) : z;
        h = gru(p.cell, h, cat(z, a));
        hA = gru(p.cell, hA, cat(zprev_frozen, a));
        vec x(d.input_size()), target(d.output_size());
        for (std::size_t k = 0; k < d.input_channels.size(); ++k)
          x.segment(static_cast<Eigen::Index>(k) * cells, cells) =
              batch.obs[ti].col(b).segment(static_cast<int>(d.input_channels[k]) * cells, cells);
        for (std::size_t k = 0; k < d.output_channels.size(); ++k)
          target.segment(static_cast<Eigen::Index>(k) * cells, cells) =
              batch.obs[ti].col(b).segment(static_cast<int>(d.output_channels[k]) * cells, cells);
        vec mq, sq, mp, sp, mpA, spA;
        stats(mlp(p.posterior, cat(h, mlp(p.encoder, x))), Z, d.min_std, mq, sq);
        stats(mlp(p.prior, h), Z, d.min_std, mp, sp);
        stats(mlp(p.prior, hA), Z, d.min_std, mpA, spA);
        z = mq + sq.cwiseProduct(nq.col(t));
        const vec zt = mp + sp.cwiseProduct(np.col(t));
        obs += (mlp(p.decoder, cat(h, z)) - target).squaredNorm();
        const real r = batch.rewards[ti](0, b);
        if (t > 0) {
          rew += std::pow(mlp(p.reward_posterior, cat(h, z))(0) - r, 2);
          prew += std::pow(mlp(p.reward_prior, cat(h, zt))(0) - r, 2);
        }
        if (frozen) {
          const auto bi = static_cast<std::size_t>(b);
          klsum += alpha * kl(frozen->mq[bi][ti], frozen->sq[bi][ti], mpA, spA) +
                   (1 - alpha) * kl(mq, sq, frozen->mp[bi][ti], frozen->sp[bi][ti]);
        } else {
          klsum += std::max(kl(mq, sq, mp, sp), cfg.free_nats);
        }
        if (record) {
          const auto bi = static_cast<std::size_t>(b);
          record->z[bi].push_back(z);
          record->mq[bi].push_back(mq);
          record->sq[bi].push_back(sq);
          record->mp[bi].push_back(mp);
          record->sp[bi].push_back(sp);
        }
      }
    }
    const real nBL = static_cast<real>(B) * L, nR = static_cast<real>(B) * (L - 1);
    return cfg.w_obs * obs / nBL + cfg.w_reward * rew / nR + cfg.w_prior_reward * prew / nR + cfg.w_kl * klsum / nBL;
  }
};

struct FdResult {
  real max_rel = 0;
  std::string worst;
};

// Central differences of `f` at `p` against `grad`, every parameter.
template <class F>
FdResult finite_difference_check(ModelParams<real> p, const ModelParams<real>& grad, F f, real step = 1e-5) {
  FdResult res;
  auto pt = p.tensors();
  const auto gt = grad.tensors();
  for (std::size_t k = 0; k < pt.size(); ++k) {
    mat& t = *pt[k].second;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const real keep = t(i);
      t(i) = keep + step;
      const real up = f(p);
      t(i) = keep - step;
      const real down = f(p);
      t(i) = keep;
      const real fd = (up - down) / (2 * step);
      const real an = (*gt[k].second)(i);
      const real rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7});
      if (rel > res.max_rel) {
        res.max_rel = rel;
        res.worst = pt[k].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

bool all_zero(const ModelParams<real>& g, const std::string& prefix, real tol) {
  for (const auto& [name, t] : g.tensors())
    if (name.starts_with(prefix) && t->cwiseAbs().maxCoeff() >= tol) return false;
  return true;
}

Dataset toy_dataset(int episodes, int steps, int res, std::uint64_t seed) {
  Dataset ds;
  ds.header.steps = steps;
  ds.header.resolution = res;
  ds.header.channels = {Channel::heightfield, Channel::mask};
  ds.header.seed = seed;
  ds.header.episode_count = static_cast<std::uint32_t>(episodes);
  Rng rng(seed);
  const int cells = res * res;
  for (int e = 0; e < episodes; ++e) {
    Episode ep;
    ep.index = static_cast<std::uint32_t>(e);
    ep.c_flat = cells;
    ep.observations.resize(2 * cells, steps + 1);
    // A square blob that the action moves: learnable structure.
    real cx = rng.uniform(-0.5, 0.5), cy = rng.uniform(-0.5, 0.5);
    for (int t = 0; t <= steps; ++t) {
      int cov = 0;
      for (int r = 0; r < res; ++r) {
        for (int c = 0; c < res; ++c) {
          const real x = (2 * c + 1 - res) / static_cast<real>(res), y = (2 * r + 1 - res) / static_cast<real>(res);
          const bool in = std::abs(x - cx) < 0.4 && std::abs(y - cy) < 0.4;
          cov += in;
          ep.observations(r * res + c, t) = in ? -0.4f : -0.5f;
          ep.observations(cells + r * res + c, t) = in ? 0.5f : -0.5f;
        }
      }
      ep.coverage.push_back(cov);
      if (t == steps) break;
      const PickPlaceAction a = PickPlaceAction{cx, cy, rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)}.float_rounded();
      ep.actions.push_back(a);
      ep.rewards.push_back(static_cast<float>(a.x_place - cx));
      ep.mispick.push_back(0);
      cx = a.x_place;
      cy = a.y_place;
    }
    ds.episodes.push_back(ep);
  }
  return ds;
}

} // namespace

TEST_CASE("zero parameters propagate zeros") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::zeros(d);
  const LatentState zero = LatentState::zeros(d);
  const mat a = PickPlaceAction{0.3, -0.2, 0.1, 0.9}.as_vector();
  const mat x = mat::Constant(d.input_size(), 1, 0.25);
  const LatentState post = posterior_step<real>(p, zero, a, x, mat::Zero(d.stoch, 1));
  CHECK(post.h.isZero(0));
  CHECK(post.mean.isZero(0));
  CHECK(post.z == post.mean);
  CHECK(post.std.isApprox(mat::Constant(d.stoch, 1, std::log(2.0) + 1e-3), 1e-15));
  const LatentState prior = prior_step<real>(p, zero, a, mat::Zero(d.stoch, 1));
  CHECK(prior.h == post.h);
  const auto [grids, reward] = decode(p, post);
  CHECK(grids.isZero(0));
  CHECK(reward(0, 0) == 0.0);
  CHECK(predict_reward_prior(p, prior) == 0.0);
  CHECK(predict_mask(p, post).count() == 0);
}

TEST_CASE("prior and posterior share the recurrent path") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 3);
  LatentState s = LatentState::zeros(d);
  s.z = mat::Constant(d.stoch, 1, 0.3);
  s.h = mat::Constant(d.deter, 1, -0.2);
  const mat a = PickPlaceAction{0.3, -0.2, 0.1, 0.9}.as_vector();
  const mat x = mat::Constant(d.input_size(), 1, 0.1);
  const LatentState q = posterior_step<real>(p, s, a, x, mat::Zero(d.stoch, 1));
  const LatentState pr = prior_step<real>(p, s, a, mat::Zero(d.stoch, 1));
  CHECK(q.h == pr.h);
  CHECK(q.z == q.mean);
  CHECK(pr.z == pr.mean);
  // Three chained prior steps with fixed seeds are reproducible.
  auto rollout = [&] {
    LatentState l = s;
    for (std::uint64_t k = 0; k < 3; ++k) l = prior_step(p, l, PickPlaceAction{0.1, 0.2, 0.3, 0.4}, 40 + k);
    return l;
  };
  CHECK(rollout() == rollout());
  CHECK((pr.std.array() > 0).all());
}

TEST_CASE("reparameterized samples follow the posterior") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 5);
  const mat a = PickPlaceAction{0.3, -0.2, 0.1, 0.9}.as_vector();
  const int n = 10000;
  const LatentState zero = LatentState::zeros(d, n);
  const mat actions = a.replicate(1, n);
  const mat x = mat::Constant(d.input_size(), n, 0.2);
  const LatentState s = posterior_step<real>(p, zero, actions, x, standard_normal<real>(d.stoch, n, 77));
  for (int i = 0; i < d.stoch; ++i) {
    const real mu = s.mean(i, 0), sd = s.std(i, 0);
    const real m = s.z.row(i).mean();
    const real v = (s.z.row(i).array() - m).square().sum() / (n - 1);
    CHECK(std::abs(m - mu) < 3 * sd / std::sqrt(n));
    // Standard error of the sample std is about sd / sqrt(2n).
    CHECK(std::abs(std::sqrt(v) - sd) < 3 * sd / std::sqrt(2.0 * n));
  }
}

TEST_CASE("KL closed form and routing") {
  const mat one = mat::Ones(1, 1), zero = mat::Zero(1, 1);
  CHECK(kl_divergence<real>(one, one, zero, one)(0, 0) == 0.5);
  CHECK(kl_divergence<real>(zero, one, zero, one)(0, 0) == 0.0);
  const KlBalanced<real> clipped = kl_balanced<real>(zero, one, zero, one, 0.8, 3.0);
  CHECK(clipped.value == 3.0);
  CHECK(clipped.d_q_mean.isZero(0));
  CHECK(clipped.d_p_std.isZero(0));
  const KlBalanced<real> a1 = kl_balanced<real>(one, one, zero, one, 1.0, 0.0);
  CHECK(a1.value == 0.5);
  CHECK(a1.d_q_mean.isZero(0));
  CHECK(a1.d_q_std.isZero(0));
  CHECK(a1.d_p_mean(0, 0) == -1.0);
  const KlBalanced<real> a0 = kl_balanced<real>(one, one, zero, one, 0.0, 0.0);
  CHECK(a0.d_p_mean.isZero(0));
  CHECK(a0.d_q_mean(0, 0) == 1.0);

  // Non-negativity and the partials, by central differences.
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    mat mq(3, 1), sq(3, 1), mp(3, 1), sp(3, 1);
    for (int i = 0; i < 3; ++i) {
      mq(i) = rng.uniform(-2, 2);
      mp(i) = rng.uniform(-2, 2);
      sq(i) = rng.uniform(0.1, 2);
      sp(i) = rng.uniform(0.1, 2);
    }
    CHECK(kl_divergence(mq, sq, mp, sp)(0, 0) >= 0);
    const KlBalanced<real> half = kl_balanced<real>(mq, sq, mp, sp, 0.5, 0.0);
    for (int which = 0; which < 4; ++which) {
      mat* target = std::array<mat*, 4>{&mq, &sq, &mp, &sp}[static_cast<std::size_t>(which)];
      const mat& g = *std::array<const mat*, 4>{&half.d_q_mean, &half.d_q_std, &half.d_p_mean,
                                                &half.d_p_std}[static_cast<std::size_t>(which)];
      for (int i = 0; i < 3; ++i) {
        const real keep = (*target)(i);
        (*target)(i) = keep + 1e-6;
        const real up = kl_divergence(mq, sq, mp, sp)(0, 0);
        (*target)(i) = keep - 1e-6;
        const real down = kl_divergence(mq, sq, mp, sp)(0, 0);
        (*target)(i) = keep;
        CHECK(0.5 * (up - down) / 2e-6 == doctest::Approx(g(i)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("reference forward agrees with the batched loss") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 11);
  const SequenceBatch<real> batch = random_batch(d, 3, 4, 12);
  for (const bool balanced : {false, true}) {
    LossConfig cfg;
    cfg.kl_balancing = balanced;
    cfg.free_nats = 0.7;
    const LossBreakdown l = rssm_loss(p, batch, cfg);
    CHECK(l.total == doctest::Approx(Reference::loss(p, batch, cfg, nullptr, nullptr)).epsilon(1e-12));
    CHECK(l.total == doctest::Approx(cfg.w_obs * l.obs + cfg.w_reward * l.reward +
                                     cfg.w_prior_reward * l.prior_reward + cfg.w_kl * l.kl)
                         .epsilon(1e-15));
  }
}

TEST_CASE("loss gradient matches central differences, plain KL") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 21, 1.5);
  const SequenceBatch<real> batch = random_batch(d, 2, 3, 22);
  LossConfig cfg;
  cfg.kl_balancing = false;
  cfg.free_nats = 0;
  cfg.w_prior_reward = 0.7;
  auto g = ModelParams<real>::zeros(d);
  rssm_loss(p, batch, cfg, &g);
  const FdResult r = finite_difference_check(p, g, [&](const ModelParams<real>& q) { return rssm_loss(q, batch, cfg).total; });
  CAPTURE(r.worst);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("balanced gradient matches central differences of the stop-gradient surrogate") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 31, 1.5);
  const SequenceBatch<real> batch = random_batch(d, 2, 3, 32);
  LossConfig cfg;
  cfg.alpha = 0.8;
  cfg.free_nats = 0;
  auto g = ModelParams<real>::zeros(d);
  const LossBreakdown l = rssm_loss(p, batch, cfg, &g);
  Reference::Frozen frozen;
  Reference::loss(p, batch, cfg, nullptr, &frozen);
  CHECK(Reference::loss(p, batch, cfg, &frozen, nullptr) == doctest::Approx(l.total).epsilon(1e-12));
  const FdResult r = finite_difference_check(
      p, g, [&](const ModelParams<real>& q) { return Reference::loss(q, batch, cfg, &frozen, nullptr); });
  CAPTURE(r.worst);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("KL balancing routes gradients away from the stopped side") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 41);
  const SequenceBatch<real> batch = random_batch(d, 2, 4, 42);
  LossConfig cfg;
  cfg.free_nats = 0;
  cfg.w_obs = cfg.w_reward = cfg.w_prior_reward = 0;
  cfg.alpha = 1;
  auto g1 = ModelParams<real>::zeros(d);
  rssm_loss(p, batch, cfg, &g1);
  CHECK(all_zero(g1, "posterior.", 1e-10));
  CHECK(all_zero(g1, "encoder.", 1e-10));
  CHECK_FALSE(all_zero(g1, "prior.", 1e-10));
  cfg.alpha = 0;
  auto g0 = ModelParams<real>::zeros(d);
  rssm_loss(p, batch, cfg, &g0);
  CHECK(all_zero(g0, "prior.", 1e-10));
  CHECK_FALSE(all_zero(g0, "posterior.", 1e-10));
}

TEST_CASE("loss edge cases") {
  const ModelDims d = tiny_dims();
  SequenceBatch<real> batch = random_batch(d, 2, 3, 5);
  for (auto& o : batch.obs) o.setZero();
  for (auto& r : batch.rewards) r.setZero();
  const LossConfig cfg;
  const LossBreakdown zero = rssm_loss(ModelParams<real>::zeros(d), batch, cfg);
  CHECK(zero.obs == 0.0);
  CHECK(zero.reward == 0.0);
  CHECK(zero.prior_reward == 0.0);
  CHECK(zero.kl == cfg.free_nats);

  // Duplicated sequences leave every mean unchanged.
  const auto p = ModelParams<real>::init(d, 6);
  const SequenceBatch<real> b = random_batch(d, 3, 4, 7);
  SequenceBatch<real> twice = b;
  for (int t = 0; t < b.length(); ++t) {
    const auto ti = static_cast<std::size_t>(t);
    twice.obs[ti].resize(b.obs[ti].rows(), 6);
    twice.obs[ti] << b.obs[ti], b.obs[ti];
    twice.actions[ti].resize(4, 6);
    twice.actions[ti] << b.actions[ti], b.actions[ti];
    twice.rewards[ti].resize(1, 6);
    twice.rewards[ti] << b.rewards[ti], b.rewards[ti];
  }
  twice.seeds.insert(twice.seeds.end(), b.seeds.begin(), b.seeds.end());
  CHECK(rssm_loss(p, twice, cfg).total == doctest::Approx(rssm_loss(p, b, cfg).total).epsilon(1e-14));

  SequenceBatch<real> short_batch = b;
  short_batch.obs.resize(1);
  short_batch.actions.resize(1);
  short_batch.rewards.resize(1);
  CHECK_THROWS_AS(rssm_loss(p, short_batch, cfg), ContractError);
}

TEST_CASE("single precision tracks double precision") {
  const ModelDims d = tiny_dims();
  const auto p = ModelParams<real>::init(d, 8);
  const SequenceBatch<real> b = random_batch(d, 2, 3, 9);
  SequenceBatch<float> bf;
  bf.resolution = b.resolution;
  bf.channels = b.channels;
  bf.seeds = b.seeds;
  for (int t = 0; t < b.length(); ++t) {
    const auto ti = static_cast<std::size_t>(t);
    bf.obs.push_back(b.obs[ti].cast<float>());
    bf.actions.push_back(b.actions[ti].cast<float>());
    bf.rewards.push_back(b.rewards[ti].cast<float>());
  }
  const LossConfig cfg;
  CHECK(rssm_loss(p.cast<float>(), bf, cfg).total == doctest::Approx(rssm_loss(p, b, cfg).total).epsilon(1e-4));
}

TEST_CASE("augmentation transforms grids and actions together") {
  CHECK(transform_action({0.3, -0.4, 0.1, 0.2}, 2, false) == PickPlaceAction{-0.3, 0.4, -0.1, -0.2});
  CHECK(transform_action({0.3, -0.4, 0.1, 0.2}, 0, true) == PickPlaceAction{0.3, 0.4, 0.1, -0.2});

  ModelDims d = tiny_dims();
  const SequenceBatch<real> b = random_batch(d, 16, 3, 13);
  AugmentConfig cfg;
  cfg.obs_noise_std = 0;
  const SequenceBatch<real> a = augment_batch(b, cfg, 99);
  const int res = d.resolution;
  const int cells = res * res;
  std::set<std::pair<int, bool>> seen;
  for (int j = 0; j < b.batch(); ++j) {
    int matches = 0;
    for (int k = 0; k < 4; ++k) {
      for (const bool flip : {false, true}) {
        bool ok = true;
        for (int t = 0; t < b.length() && ok; ++t) {
          const auto ti = static_cast<std::size_t>(t);
          for (int c = 0; c < 2 && ok; ++c) {
            const mat src = b.obs[ti].col(j).segment(c * cells, cells).transpose();
            Observation o{res, {Channel::mask}, src};
            const Observation tr = transform_observation(o, k, flip);
            ok = tr.data.transpose() == a.obs[ti].col(j).segment(c * cells, cells);
          }
          ok = ok && transform_action(PickPlaceAction::from_vector(vec(b.actions[ti].col(j))), k, flip).as_vector() ==
                         vec(a.actions[ti].col(j));
          ok = ok && a.rewards[ti](0, j) == b.rewards[ti](0, j);
        }
        if (ok) {
          ++matches;
          seen.insert({k, flip});
        }
      }
    }
    // Random grids have no symmetry, so exactly one transform explains each sequence.
    CHECK(matches == 1);
  }
  CHECK(seen.size() >= 4);

  // Noise touches heightfield rows only.
  cfg.obs_noise_std = 0.02;
  cfg.rotate = cfg.vflip = false;
  const SequenceBatch<real> n = augment_batch(b, cfg, 5);
  const mat diff = n.obs[1] - b.obs[1];
  CHECK(diff.bottomRows(cells).isZero(0));
  const real sd = std::sqrt(diff.topRows(cells).squaredNorm() / static_cast<real>(diff.topRows(cells).size()));
  CHECK(sd == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("parameter counts follow the layer shapes") {
  const ModelDims d; // H=64, Z=16, widths 128, 32x32, one input and one output channel
  const auto p = ModelParams<real>::zeros(d);
  auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::size_t H = 64, Z = 16, W = 128, E = 128, A = 4, X = 32 * 32;
  const std::size_t cell = 3 * H * (Z + A) + 3 * H * H + 2 * 3 * H;
  const std::size_t posterior = dense(H + E, W) + dense(W, W) + dense(W, 2 * Z);
  const std::size_t prior = dense(H, W) + dense(W, W) + dense(W, 2 * Z);
  CHECK(p.transition_parameter_count() == cell + posterior + prior);
  CHECK(p.transition_parameter_count() == 90816);
  const std::size_t encoder = dense(X, W) + dense(W, W) + dense(W, E);
  const std::size_t decoder = dense(H + Z, W) + dense(W, W) + dense(W, X);
  const std::size_t heads = 2 * (dense(H + Z, W) + dense(W, W) + dense(W, 1));
  CHECK(p.parameter_count() == cell + posterior + prior + encoder + decoder + heads);
}

TEST_CASE("training steps, checkpoints and resume") {
  const Dataset ds = toy_dataset(12, 6, 8, 3);
  Config cfg = Config::defaults();
  for (const auto& [k, v] : std::map<std::string, std::string>{{"obs.resolution", "8"},
                                                               {"model.deter", "8"},
                                                               {"model.stoch", "4"},
                                                               {"model.hidden", "16"},
                                                               {"model.embed", "16"},
                                                               {"train.batch_size", "4"},
                                                               {"train.seq_len", "4"},
                                                               {"train.lr", "0"}})
    cfg.set(k, v);
  const ModelDims dims = ModelDims::from_config(cfg);
  TrainConfig tc = TrainConfig::from_config(cfg);

  SUBCASE("zero learning rate leaves parameters bitwise unchanged") {
    TrainState s = TrainState::fresh(dims, 1);
    const auto before = s.params.cast<real>();
    train_step(s, ds, tc);
    const auto a = before.tensors();
    const auto b = s.params.tensors();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
    CHECK(s.step == 1);
  }

  SUBCASE("checkpoint round trip and resume") {
    tc.learning_rate = 1e-3;
    TrainState a = TrainState::fresh(dims, 1);
    for (int i = 0; i < 3; ++i) train_step(a, ds, tc);
    const auto path = std::filesystem::temp_directory_path() / "clothpick_test.ckpt";
    write_checkpoint(path, a, cfg);
    auto [cfg2, b] = read_checkpoint(path);
    CHECK(cfg2.to_text() == cfg.to_text());
    CHECK(b.step == 3);
    const LossRecord next_a = train_step(a, ds, tc);
    const LossRecord next_b = train_step(b, ds, tc);
    CHECK(next_a.loss.total == next_b.loss.total);
    CHECK(*a.params.tensors()[0].second == *b.params.tensors()[0].second);

    // Corruptions are format errors.
    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(read_checkpoint(path), FormatError);
    write_checkpoint(path, a, cfg);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
    CHECK_THROWS_AS(read_checkpoint(path), FormatError);
    std::filesystem::remove(path);
  }

  SUBCASE("loss falls on a learnable toy problem") {
    tc.learning_rate = 3e-3;
    tc.steps = 150;
    TrainState s = TrainState::fresh(dims, 2);
    const std::vector<LossRecord> log = train(s, ds, tc);
    REQUIRE(log.size() == 150);
    real first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
      first += log[static_cast<std::size_t>(i)].loss.total;
      last += log[log.size() - 1 - static_cast<std::size_t>(i)].loss.total;
    }
    CHECK(last < first);
  }

  SUBCASE("sequence length longer than an episode is rejected") {
    tc.seq_len = 8;
    TrainState s = TrainState::fresh(dims, 1);
    CHECK_THROWS_AS(train_step(s, ds, tc), ContractError);
  }
}
