#include "clothpick/rssm.hpp"

#include "binio.hpp"
#include "clothpick/clothsim.hpp"
#include "clothpick/config.hpp"
#include "clothpick/dataset.hpp"
#include "clothpick/errors.hpp"
#include "clothpick/grid.hpp"
#include "clothpick/rng.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <map>

namespace clothpick {

namespace {

template <class T>
T elu(T x) {
  return x > 0 ? x : std::expm1(x);
}

template <class T>
T elu_grad(T x) {
  return x > 0 ? T(1) : std::exp(x);
}

template <class T>
T softplus(T x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
void require_finite(const matrix<T>& m, const char* name) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite values in ") + name);
}

template <class T>
struct MlpCache {
  std::vector<matrix<T>> inputs; // input to each layer
  std::vector<matrix<T>> pre;    // pre-activation of each layer
};

template <class T>
matrix<T> mlp_forward(const Mlp<T>& mlp, const matrix<T>& x, MlpCache<T>* cache) {
  matrix<T> a = x;
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    matrix<T> pre = mlp[l].w * a;
    pre.colwise() += mlp[l].b.col(0);
    if (cache) cache->inputs.push_back(std::move(a));
    if (l + 1 == mlp.size()) {
      if (cache) cache->pre.push_back(pre);
      return pre;
    }
    a = pre.unaryExpr([](T v) { return elu(v); });
    if (cache) cache->pre.push_back(std::move(pre));
  }
  return a;
}

// Accumulates parameter gradients into `grad`; returns d(loss)/d(input).
template <class T>
matrix<T> mlp_backward(const Mlp<T>& mlp, const MlpCache<T>& cache, matrix<T> d, Mlp<T>& grad) {
  for (std::size_t l = mlp.size(); l-- > 0;) {
    if (l + 1 != mlp.size()) d.array() *= cache.pre[l].unaryExpr([](T v) { return elu_grad(v); }).array();
    grad[l].w.noalias() += d * cache.inputs[l].transpose();
    grad[l].b.col(0) += d.rowwise().sum();
    d = mlp[l].w.transpose() * d;
  }
  return d;
}

template <class T>
struct GruCache {
  matrix<T> in, h, r, u, n, ghn;
};

template <class T>
matrix<T> gru_forward(const Gru<T>& g, const matrix<T>& h, const matrix<T>& in, GruCache<T>* cache) {
  const Eigen::Index H = h.rows();
  matrix<T> gx = g.wx * in;
  gx.colwise() += g.bx.col(0);
  matrix<T> gh = g.wh * h;
  gh.colwise() += g.bh.col(0);
  const matrix<T> r = (gx.topRows(H) + gh.topRows(H)).unaryExpr([](T v) { return sigmoid(v); });
  const matrix<T> u = (gx.middleRows(H, H) + gh.middleRows(H, H)).unaryExpr([](T v) { return sigmoid(v); });
  const matrix<T> ghn = gh.bottomRows(H);
  const matrix<T> n = (gx.bottomRows(H).array() + r.array() * ghn.array()).tanh().matrix();
  matrix<T> out = ((T(1) - u.array()) * n.array() + u.array() * h.array()).matrix();
  if (cache) *cache = {in, h, r, u, n, ghn};
  return out;
}

// Returns d/dh_prev; writes d/d(input) when `d_in` is given.
template <class T>
matrix<T> gru_backward(const Gru<T>& g, const GruCache<T>& c, const matrix<T>& dh, Gru<T>& grad, matrix<T>* d_in) {
  const Eigen::Index H = dh.rows();
  const Eigen::Index B = dh.cols();
  const auto one = T(1);
  const matrix<T> dn = (dh.array() * (one - c.u.array())).matrix();
  const matrix<T> du = (dh.array() * (c.h.array() - c.n.array())).matrix();
  const matrix<T> dpre_n = (dn.array() * (one - c.n.array().square())).matrix();
  const matrix<T> dr = (dpre_n.array() * c.ghn.array()).matrix();
  matrix<T> dgx(3 * H, B), dgh(3 * H, B);
  dgx.topRows(H) = (dr.array() * c.r.array() * (one - c.r.array())).matrix();
  dgx.middleRows(H, H) = (du.array() * c.u.array() * (one - c.u.array())).matrix();
  dgx.bottomRows(H) = dpre_n;
  dgh.topRows(2 * H) = dgx.topRows(2 * H);
  dgh.bottomRows(H) = (dpre_n.array() * c.r.array()).matrix();
  grad.wx.noalias() += dgx * c.in.transpose();
  grad.bx.col(0) += dgx.rowwise().sum();
  grad.wh.noalias() += dgh * c.h.transpose();
  grad.bh.col(0) += dgh.rowwise().sum();
  if (d_in) *d_in = g.wx.transpose() * dgx;
  matrix<T> dprev = (dh.array() * c.u.array()).matrix();
  dprev.noalias() += g.wh.transpose() * dgh;
  return dprev;
}

template <class T>
matrix<T> stack(const matrix<T>& a, const matrix<T>& b) {
  matrix<T> out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

template <class T>
void split_stats(const matrix<T>& out, int Z, real min_std, matrix<T>& mean, matrix<T>& std) {
  mean = out.topRows(Z);
  std = out.bottomRows(Z).unaryExpr([min_std](T v) { return softplus(v) + static_cast<T>(min_std); });
}

template <class T>
Dense<T> dense_zeros(int out, int in) {
  return {matrix<T>::Zero(out, in), matrix<T>::Zero(out, 1)};
}

template <class T>
Mlp<T> mlp_zeros(std::initializer_list<int> sizes) {
  Mlp<T> m;
  const std::vector<int> s(sizes);
  for (std::size_t i = 0; i + 1 < s.size(); ++i) m.push_back(dense_zeros<T>(s[i + 1], s[i]));
  return m;
}

std::vector<int> channel_rows(const std::vector<Channel>& have, const std::vector<Channel>& want, int cells,
                              const char* what) {
  std::vector<int> rows;
  for (const Channel c : want) {
    const auto it = std::find(have.begin(), have.end(), c);
    if (it == have.end()) throw ContractError(std::string(what) + " channel '" + to_string(c) + "' is not present");
    rows.push_back(static_cast<int>(it - have.begin()) * cells);
  }
  return rows;
}

template <class T>
matrix<T> gather_rows(const matrix<T>& src, const std::vector<int>& offsets, int cells) {
  matrix<T> out(static_cast<Eigen::Index>(offsets.size()) * cells, src.cols());
  for (std::size_t k = 0; k < offsets.size(); ++k)
    out.middleRows(static_cast<Eigen::Index>(k) * cells, cells) = src.middleRows(offsets[k], cells);
  return out;
}

struct KlParts {
  template <class T>
  static void compute(const matrix<T>& mq, const matrix<T>& sq, const matrix<T>& mp, const matrix<T>& sp,
                      matrix<T>& kl, matrix<T>* dmq, matrix<T>* dsq, matrix<T>* dmp, matrix<T>* dsp) {
    const auto diff = (mq - mp).array();
    const auto vp = sp.array().square();
    const auto num = sq.array().square() + diff.square();
    kl = ((sp.array() / sq.array()).log() + num / (T(2) * vp) - T(0.5)).matrix().colwise().sum();
    if (dmq) *dmq = (diff / vp).matrix();
    if (dsq) *dsq = (sq.array() / vp - sq.array().inverse()).matrix();
    if (dmp) *dmp = (-diff / vp).matrix();
    if (dsp) *dsp = (sp.array().inverse() - num / (vp * sp.array())).matrix();
  }
};

} // namespace

bool ModelDims::decodes(Channel c) const {
  return std::find(output_channels.begin(), output_channels.end(), c) != output_channels.end();
}

ModelDims ModelDims::from_config(const Config& config) {
  ModelDims d;
  d.deter = static_cast<int>(config.get_int("model.deter"));
  d.stoch = static_cast<int>(config.get_int("model.stoch"));
  d.hidden = static_cast<int>(config.get_int("model.hidden"));
  d.embed = static_cast<int>(config.get_int("model.embed"));
  d.resolution = static_cast<int>(config.get_int("obs.resolution"));
  d.input_channels = parse_channels(config.get("model.input_channels"));
  d.output_channels = parse_channels(config.get("model.output_channels"));
  d.min_std = config.get_double("model.min_std");
  if (d.deter < 1 || d.stoch < 1 || d.hidden < 1 || d.embed < 1) throw ConfigError("model sizes must be >= 1");
  if (!(d.min_std > 0)) throw ConfigError("model.min_std must be > 0");
  const std::vector<Channel> obs = parse_channels(config.get("obs.channels"));
  for (const Channel c : d.input_channels)
    if (std::find(obs.begin(), obs.end(), c) == obs.end())
      throw ConfigError("model input channel '" + to_string(c) + "' is not rendered (obs.channels)");
  for (const Channel c : d.output_channels)
    if (std::find(obs.begin(), obs.end(), c) == obs.end())
      throw ConfigError("model output channel '" + to_string(c) + "' is not rendered (obs.channels)");
  return d;
}

template <class T>
ModelParams<T> ModelParams<T>::zeros(const ModelDims& d) {
  ModelParams p;
  p.dims = d;
  const int H = d.deter, Z = d.stoch, W = d.hidden;
  p.encoder = mlp_zeros<T>({d.input_size(), W, W, d.embed});
  p.cell = {matrix<T>::Zero(3 * H, Z + kActionDim), matrix<T>::Zero(3 * H, H), matrix<T>::Zero(3 * H, 1),
            matrix<T>::Zero(3 * H, 1)};
  p.posterior = mlp_zeros<T>({H + d.embed, W, W, 2 * Z});
  p.prior = mlp_zeros<T>({H, W, W, 2 * Z});
  p.decoder = mlp_zeros<T>({H + Z, W, W, d.output_size()});
  p.reward_posterior = mlp_zeros<T>({H + Z, W, W, 1});
  p.reward_prior = mlp_zeros<T>({H + Z, W, W, 1});
  return p;
}

template <class T>
ModelParams<T> ModelParams<T>::init(const ModelDims& d, std::uint64_t seed, real scale) {
  ModelParams p = zeros(d);
  std::uint64_t k = 0;
  for (auto& [name, t] : p.tensors()) {
    ++k;
    if (name.ends_with(".b") || name.ends_with(".bx") || name.ends_with(".bh")) continue;
    Rng rng(derive_seed(seed, {k}));
    const real limit = scale * std::sqrt(6.0 / static_cast<real>(t->rows() + t->cols()));
    for (Eigen::Index j = 0; j < t->cols(); ++j)
      for (Eigen::Index i = 0; i < t->rows(); ++i) (*t)(i, j) = static_cast<T>(rng.uniform(-limit, limit));
  }
  return p;
}

template <class T>
std::vector<std::pair<std::string, matrix<T>*>> ModelParams<T>::tensors() {
  std::vector<std::pair<std::string, matrix<T>*>> out;
  auto add_mlp = [&](const std::string& name, Mlp<T>& m) {
    for (std::size_t l = 0; l < m.size(); ++l) {
      out.emplace_back(name + "." + std::to_string(l) + ".w", &m[l].w);
      out.emplace_back(name + "." + std::to_string(l) + ".b", &m[l].b);
    }
  };
  add_mlp("encoder", encoder);
  out.emplace_back("cell.wx", &cell.wx);
  out.emplace_back("cell.wh", &cell.wh);
  out.emplace_back("cell.bx", &cell.bx);
  out.emplace_back("cell.bh", &cell.bh);
  add_mlp("posterior", posterior);
  add_mlp("prior", prior);
  add_mlp("decoder", decoder);
  add_mlp("reward_posterior", reward_posterior);
  add_mlp("reward_prior", reward_prior);
  return out;
}

template <class T>
std::vector<std::pair<std::string, const matrix<T>*>> ModelParams<T>::tensors() const {
  std::vector<std::pair<std::string, const matrix<T>*>> out;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->tensors()) out.emplace_back(name, t);
  return out;
}

template <class T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors()) n += static_cast<std::size_t>(t->size());
  return n;
}

template <class T>
std::size_t ModelParams<T>::transition_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors())
    if (name.starts_with("cell.") || name.starts_with("posterior.") || name.starts_with("prior."))
      n += static_cast<std::size_t>(t->size());
  return n;
}

template <class T>
void ModelParams<T>::set_zero() {
  for (auto& [name, t] : tensors()) t->setZero();
}

template <class T>
template <class U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out = ModelParams<U>::zeros(dims);
  const auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

template <class T>
Latent<T> Latent<T>::zeros(const ModelDims& d, int n) {
  return {matrix<T>::Zero(d.deter, n), matrix<T>::Zero(d.stoch, n), matrix<T>::Ones(d.stoch, n),
          matrix<T>::Zero(d.stoch, n)};
}

template <class T>
Latent<T> Latent<T>::column(int i) const {
  return {h.col(i), mean.col(i), std.col(i), z.col(i)};
}

template <class T>
vector<T> model_input(const ModelDims& dims, const Observation& obs) {
  if (obs.resolution != dims.resolution)
    throw ContractError("observation resolution " + std::to_string(obs.resolution) + " does not match the model's " +
                        std::to_string(dims.resolution));
  const int cells = dims.resolution * dims.resolution;
  vector<T> x(dims.input_size());
  for (std::size_t k = 0; k < dims.input_channels.size(); ++k)
    x.segment(static_cast<Eigen::Index>(k) * cells, cells) =
        obs.channel(dims.input_channels[k]).transpose().template cast<T>();
  return x;
}

template <class T>
matrix<T> standard_normal(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  matrix<T> out(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) out(i, j) = static_cast<T>(rng.normal());
  return out;
}

template <class T>
Latent<T> posterior_step(const ModelParams<T>& params, const Latent<T>& prev, const matrix<T>& actions,
                         const matrix<T>& inputs, const matrix<T>& noise) {
  const ModelDims& d = params.dims;
  if (inputs.rows() != d.input_size() || actions.rows() != kActionDim || inputs.cols() != prev.h.cols())
    throw ContractError("posterior_step input shapes do not match the model");
  Latent<T> out;
  out.h = gru_forward(params.cell, prev.h, stack(prev.z, actions), static_cast<GruCache<T>*>(nullptr));
  require_finite(out.h, "posterior h");
  const matrix<T> e = mlp_forward(params.encoder, inputs, static_cast<MlpCache<T>*>(nullptr));
  const matrix<T> stats = mlp_forward(params.posterior, stack(out.h, e), static_cast<MlpCache<T>*>(nullptr));
  split_stats(stats, d.stoch, d.min_std, out.mean, out.std);
  require_finite(out.mean, "posterior mean");
  require_finite(out.std, "posterior std");
  out.z = (out.mean.array() + out.std.array() * noise.array()).matrix();
  return out;
}

template <class T>
Latent<T> prior_step(const ModelParams<T>& params, const Latent<T>& prev, const matrix<T>& actions,
                     const matrix<T>& noise) {
  const ModelDims& d = params.dims;
  if (actions.rows() != kActionDim || actions.cols() != prev.h.cols())
    throw ContractError("prior_step action shape does not match the latent batch");
  Latent<T> out;
  out.h = gru_forward(params.cell, prev.h, stack(prev.z, actions), static_cast<GruCache<T>*>(nullptr));
  require_finite(out.h, "prior h");
  const matrix<T> stats = mlp_forward(params.prior, out.h, static_cast<MlpCache<T>*>(nullptr));
  split_stats(stats, d.stoch, d.min_std, out.mean, out.std);
  require_finite(out.mean, "prior mean");
  require_finite(out.std, "prior std");
  out.z = (out.mean.array() + out.std.array() * noise.array()).matrix();
  return out;
}

LatentState posterior_step(const ModelParams<real>& params, const LatentState& prev, const PickPlaceAction& action,
                           const Observation& obs, std::uint64_t noise_seed) {
  const mat a = action.as_vector();
  const mat x = model_input<real>(params.dims, obs);
  return posterior_step<real>(params, prev, a, x, standard_normal<real>(params.dims.stoch, 1, noise_seed));
}

LatentState prior_step(const ModelParams<real>& params, const LatentState& prev, const PickPlaceAction& action,
                       std::uint64_t noise_seed) {
  const mat a = action.as_vector();
  return prior_step<real>(params, prev, a, standard_normal<real>(params.dims.stoch, 1, noise_seed));
}

template <class T>
std::pair<matrix<T>, matrix<T>> decode(const ModelParams<T>& params, const Latent<T>& latent) {
  const matrix<T> hz = stack(latent.h, latent.z);
  matrix<T> grids = mlp_forward(params.decoder, hz, static_cast<MlpCache<T>*>(nullptr));
  matrix<T> reward = mlp_forward(params.reward_posterior, hz, static_cast<MlpCache<T>*>(nullptr));
  require_finite(grids, "decoded observation");
  require_finite(reward, "posterior reward");
  return {std::move(grids), std::move(reward)};
}

template <class T>
matrix<T> predict_reward_prior(const ModelParams<T>& params, const Latent<T>& latent) {
  matrix<T> r = mlp_forward(params.reward_prior, stack(latent.h, latent.z), static_cast<MlpCache<T>*>(nullptr));
  require_finite(r, "prior reward");
  return r;
}

template <class T>
matrix<T> predict_reward_posterior(const ModelParams<T>& params, const Latent<T>& latent) {
  matrix<T> r = mlp_forward(params.reward_posterior, stack(latent.h, latent.z), static_cast<MlpCache<T>*>(nullptr));
  require_finite(r, "posterior reward");
  return r;
}

Observation decode_observation(const ModelParams<real>& params, const LatentState& latent) {
  const auto [grids, reward] = decode(params, latent.column(0));
  Observation obs;
  obs.resolution = params.dims.resolution;
  obs.channels = params.dims.output_channels;
  const int cells = obs.resolution * obs.resolution;
  obs.data.resize(static_cast<Eigen::Index>(obs.channels.size()), cells);
  for (Eigen::Index k = 0; k < obs.data.rows(); ++k) obs.data.row(k) = grids.col(0).segment(k * cells, cells).transpose();
  return obs;
}

real predict_reward_prior(const ModelParams<real>& params, const LatentState& latent) {
  return predict_reward_prior<real>(params, latent.column(0))(0, 0);
}

Mask predict_mask(const ModelParams<real>& params, const LatentState& latent, real threshold) {
  if (!params.dims.decodes(Channel::mask)) throw ContractError("the model does not decode a mask channel");
  const Observation obs = decode_observation(params, latent);
  const auto m = obs.channel(Channel::mask);
  Mask out;
  out.resolution = obs.resolution;
  out.cells.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) out.cells[static_cast<std::size_t>(i)] = m(i) > threshold ? 1 : 0;
  return out;
}

template <class T>
matrix<T> kl_divergence(const matrix<T>& q_mean, const matrix<T>& q_std, const matrix<T>& p_mean,
                        const matrix<T>& p_std) {
  matrix<T> kl;
  KlParts::compute<T>(q_mean, q_std, p_mean, p_std, kl, nullptr, nullptr, nullptr, nullptr);
  return kl;
}

template <class T>
KlBalanced<T> kl_balanced(const matrix<T>& q_mean, const matrix<T>& q_std, const matrix<T>& p_mean,
                          const matrix<T>& p_std, T alpha, T free_nats) {
  if ((q_std.array() <= 0).any() || (p_std.array() <= 0).any()) throw ContractError("KL needs positive std");
  KlBalanced<T> out;
  matrix<T> kl;
  KlParts::compute<T>(q_mean, q_std, p_mean, p_std, kl, &out.d_q_mean, &out.d_q_std, &out.d_p_mean, &out.d_p_std);
  const auto n = static_cast<T>(kl.cols());
  T sum = 0;
  for (Eigen::Index j = 0; j < kl.cols(); ++j) {
    const bool clipped = kl(0, j) < free_nats;
    sum += clipped ? free_nats : kl(0, j);
    const T q_share = clipped ? T(0) : (T(1) - alpha) / n;
    const T p_share = clipped ? T(0) : alpha / n;
    out.d_q_mean.col(j) *= q_share;
    out.d_q_std.col(j) *= q_share;
    out.d_p_mean.col(j) *= p_share;
    out.d_p_std.col(j) *= p_share;
  }
  out.value = sum / n;
  return out;
}

LossConfig LossConfig::from_config(const Config& config) {
  LossConfig c;
  c.alpha = config.get_double("train.alpha");
  c.kl_balancing = config.get_bool("train.kl_balancing");
  c.free_nats = config.get_double("train.free_nats");
  c.w_obs = config.get_double("train.w_obs");
  c.w_reward = config.get_double("train.w_reward");
  c.w_kl = config.get_double("train.w_kl");
  c.w_prior_reward = config.get_double("train.w_prior_reward");
  if (!(c.alpha >= 0 && c.alpha <= 1)) throw ConfigError("train.alpha must be in [0, 1]");
  if (!(c.free_nats >= 0)) throw ConfigError("train.free_nats must be >= 0");
  return c;
}

template <class T>
void SequenceBatch<T>::validate() const {
  const int L = length();
  const int B = batch();
  if (L < 2) throw ContractError("sequence length must be >= 2");
  if (B < 1) throw ContractError("batch is empty");
  if (static_cast<int>(actions.size()) != L || static_cast<int>(rewards.size()) != L)
    throw ContractError("batch observation, action and reward lengths differ");
  const auto rows = static_cast<Eigen::Index>(channels.size()) * resolution * resolution;
  for (int t = 0; t < L; ++t) {
    const auto i = static_cast<std::size_t>(t);
    if (obs[i].rows() != rows || obs[i].cols() != B || actions[i].rows() != kActionDim || actions[i].cols() != B ||
        rewards[i].rows() != 1 || rewards[i].cols() != B)
      throw ContractError("batch tensors at step " + std::to_string(t) + " have the wrong shape");
  }
}

template <class T>
std::pair<matrix<T>, matrix<T>> sequence_noise(std::uint64_t seed, int stoch, int length) {
  Rng rng(seed);
  matrix<T> post(stoch, length), prior(stoch, length);
  for (int t = 0; t < length; ++t)
    for (int i = 0; i < stoch; ++i) post(i, t) = static_cast<T>(rng.normal());
  for (int t = 0; t < length; ++t)
    for (int i = 0; i < stoch; ++i) prior(i, t) = static_cast<T>(rng.normal());
  return {post, prior};
}

template <class T>
LossBreakdown rssm_loss(const ModelParams<T>& params, const SequenceBatch<T>& batch, const LossConfig& config,
                        ModelParams<T>* grad) {
  batch.validate();
  const ModelDims& d = params.dims;
  if (batch.resolution != d.resolution) throw ContractError("batch resolution does not match the model");
  const int L = batch.length();
  const int B = batch.batch();
  const int H = d.deter;
  const int Z = d.stoch;
  const int cells = d.resolution * d.resolution;
  const std::vector<int> in_rows = channel_rows(batch.channels, d.input_channels, cells, "model input");
  const std::vector<int> out_rows = channel_rows(batch.channels, d.output_channels, cells, "model output");

  std::vector<matrix<T>> eta_q(static_cast<std::size_t>(L), matrix<T>(Z, B));
  std::vector<matrix<T>> eta_p(static_cast<std::size_t>(L), matrix<T>(Z, B));
  for (int b = 0; b < B; ++b) {
    const auto [nq, np] = sequence_noise<T>(batch.seeds[static_cast<std::size_t>(b)], Z, L);
    for (int t = 0; t < L; ++t) {
      eta_q[static_cast<std::size_t>(t)].col(b) = nq.col(t);
      eta_p[static_cast<std::size_t>(t)].col(b) = np.col(t);
    }
  }

  struct Step {
    GruCache<T> gru;
    MlpCache<T> enc, post, prior, dec, rpost, rprior;
    matrix<T> q_raw, p_raw, mq, sq, mp, sp, obs_err, r_err, rp_err;
  };
  std::vector<Step> steps(static_cast<std::size_t>(L));
  const bool keep = grad != nullptr;

  const T nBL = static_cast<T>(B) * L;
  const T nR = static_cast<T>(B) * (L - 1);
  T obs_sum = 0, rew_sum = 0, prew_sum = 0, kl_sum = 0;
  matrix<T> h = matrix<T>::Zero(H, B);
  matrix<T> z = matrix<T>::Zero(Z, B);
  for (int t = 0; t < L; ++t) {
    Step& s = steps[static_cast<std::size_t>(t)];
    const auto ti = static_cast<std::size_t>(t);
    h = gru_forward(params.cell, h, stack(z, batch.actions[ti]), keep ? &s.gru : nullptr);
    const matrix<T> e = mlp_forward(params.encoder, gather_rows(batch.obs[ti], in_rows, cells), keep ? &s.enc : nullptr);
    const matrix<T> qo = mlp_forward(params.posterior, stack(h, e), keep ? &s.post : nullptr);
    split_stats(qo, Z, d.min_std, s.mq, s.sq);
    s.q_raw = qo.bottomRows(Z);
    z = (s.mq.array() + s.sq.array() * eta_q[ti].array()).matrix();
    const matrix<T> po = mlp_forward(params.prior, h, keep ? &s.prior : nullptr);
    split_stats(po, Z, d.min_std, s.mp, s.sp);
    s.p_raw = po.bottomRows(Z);
    const matrix<T> zt = (s.mp.array() + s.sp.array() * eta_p[ti].array()).matrix();

    const matrix<T> hz = stack(h, z);
    s.obs_err = mlp_forward(params.decoder, hz, keep ? &s.dec : nullptr) - gather_rows(batch.obs[ti], out_rows, cells);
    obs_sum += s.obs_err.squaredNorm();
    s.r_err = mlp_forward(params.reward_posterior, hz, keep ? &s.rpost : nullptr) - batch.rewards[ti];
    s.rp_err = mlp_forward(params.reward_prior, stack(h, zt), keep ? &s.rprior : nullptr) - batch.rewards[ti];
    if (t > 0) {
      rew_sum += s.r_err.squaredNorm();
      prew_sum += s.rp_err.squaredNorm();
    }
    const matrix<T> kl = kl_divergence(s.mq, s.sq, s.mp, s.sp);
    for (int b = 0; b < B; ++b) kl_sum += std::max(kl(0, b), static_cast<T>(config.free_nats));
  }

  LossBreakdown out;
  out.obs = static_cast<real>(obs_sum / nBL);
  out.reward = static_cast<real>(rew_sum / nR);
  out.prior_reward = static_cast<real>(prew_sum / nR);
  out.kl = static_cast<real>(kl_sum / nBL);
  out.total = config.w_obs * out.obs + config.w_reward * out.reward + config.w_prior_reward * out.prior_reward +
              config.w_kl * out.kl;
  for (const auto& [name, v] : {std::pair{"obs_loss", out.obs}, std::pair{"reward_loss", out.reward},
                                std::pair{"prior_reward_loss", out.prior_reward}, std::pair{"kl_loss", out.kl}}) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + name);
  }
  if (!grad) return out;

  // Two adjoint streams. `main` carries every term except the prior-side KL
  // share; `held` carries that share back through h while treating the
  // posterior samples fed to the recurrence as constants.
  const bool balanced = config.kl_balancing;
  const T alpha = static_cast<T>(balanced ? config.alpha : 0.5);
  const T w_obs = static_cast<T>(config.w_obs);
  const T w_r = static_cast<T>(config.w_reward);
  const T w_pr = static_cast<T>(config.w_prior_reward);
  const T w_kl = static_cast<T>(config.w_kl);
  matrix<T> dh_main = matrix<T>::Zero(H, B);
  matrix<T> dh_held = matrix<T>::Zero(H, B);
  matrix<T> dz_next = matrix<T>::Zero(Z, B);
  matrix<T> d_in;
  auto sig = [](T v) { return sigmoid(v); };
  for (int t = L - 1; t >= 0; --t) {
    Step& s = steps[static_cast<std::size_t>(t)];
    const auto ti = static_cast<std::size_t>(t);
    matrix<T> dhz = mlp_backward(params.decoder, s.dec, matrix<T>((T(2) * w_obs / nBL) * s.obs_err), grad->decoder);
    matrix<T> dhzt = matrix<T>::Zero(H + Z, B);
    if (t > 0) {
      dhz += mlp_backward(params.reward_posterior, s.rpost, matrix<T>((T(2) * w_r / nR) * s.r_err), grad->reward_posterior);
      dhzt = mlp_backward(params.reward_prior, s.rprior, matrix<T>((T(2) * w_pr / nR) * s.rp_err), grad->reward_prior);
    }
    // The KL helper averages over B; rescale to the B*L mean and weight.
    KlBalanced<T> k = kl_balanced(s.mq, s.sq, s.mp, s.sp, balanced ? alpha : T(1), static_cast<T>(config.free_nats));
    const T kscale = w_kl / static_cast<T>(L);
    matrix<T> dmq, dsq;
    if (balanced) {
      dmq = kscale * k.d_q_mean;
      dsq = kscale * k.d_q_std;
    } else {
      // Full gradient on both sides: rerun with alpha = 0 for the posterior share.
      KlBalanced<T> kq = kl_balanced(s.mq, s.sq, s.mp, s.sp, T(0), static_cast<T>(config.free_nats));
      dmq = kscale * kq.d_q_mean;
      dsq = kscale * kq.d_q_std;
    }
    const matrix<T> dp_mean = kscale * k.d_p_mean;
    const matrix<T> dp_std = kscale * k.d_p_std;

    dh_main += dhz.topRows(H) + dhzt.topRows(H);
    const matrix<T> dz = dhz.bottomRows(Z) + dz_next;
    const matrix<T> dzt = dhzt.bottomRows(Z);
    dmq += dz;
    dsq += (dz.array() * eta_q[ti].array()).matrix();
    const matrix<T> q_sig = s.q_raw.unaryExpr(sig);
    const matrix<T> p_sig = s.p_raw.unaryExpr(sig);

    const matrix<T> dpost = mlp_backward(params.posterior, s.post, stack(dmq, matrix<T>((dsq.array() * q_sig.array()).matrix())),
                                         grad->posterior);
    dh_main += dpost.topRows(H);
    mlp_backward(params.encoder, s.enc, matrix<T>(dpost.bottomRows(d.embed)), grad->encoder);

    matrix<T> dpm_main = dzt;
    matrix<T> dps_main = (dzt.array() * eta_p[ti].array()).matrix();
    if (!balanced) {
      dpm_main += dp_mean;
      dps_main += dp_std;
    }
    dh_main += mlp_backward(params.prior, s.prior, stack(dpm_main, matrix<T>((dps_main.array() * p_sig.array()).matrix())),
                            grad->prior);
    if (balanced)
      dh_held += mlp_backward(params.prior, s.prior, stack(dp_mean, matrix<T>((dp_std.array() * p_sig.array()).matrix())),
                              grad->prior);

    dh_main = gru_backward(params.cell, s.gru, dh_main, grad->cell, &d_in);
    dz_next = d_in.topRows(Z);
    if (balanced) dh_held = gru_backward(params.cell, s.gru, dh_held, grad->cell, static_cast<matrix<T>*>(nullptr));
  }
  return out;
}

AugmentConfig AugmentConfig::from_config(const Config& config) {
  AugmentConfig c;
  c.rotate = config.get_bool("train.rotate");
  c.vflip = config.get_bool("train.vflip");
  c.obs_noise_std = config.get_double("train.obs_noise_std");
  if (!(c.obs_noise_std >= 0)) throw ConfigError("train.obs_noise_std must be >= 0");
  return c;
}

PickPlaceAction transform_action(const PickPlaceAction& a, int quarter_turns, bool vflip) {
  const vec2 p = transform_point(a.pick(), quarter_turns, vflip);
  const vec2 q = transform_point(a.place(), quarter_turns, vflip);
  return {p.x(), p.y(), q.x(), q.y()};
}

template <class T>
SequenceBatch<T> augment_batch(const SequenceBatch<T>& batch, const AugmentConfig& config, std::uint64_t seed) {
  batch.validate();
  const int res = batch.resolution;
  const int cells = res * res;
  SequenceBatch<T> out = batch;
  for (int b = 0; b < batch.batch(); ++b) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(b)}));
    const int k = config.rotate ? static_cast<int>(rng.index(4)) : 0;
    const bool flip = config.vflip && rng.bernoulli(0.5);
    for (int t = 0; t < batch.length(); ++t) {
      const auto ti = static_cast<std::size_t>(t);
      for (std::size_t c = 0; c < batch.channels.size(); ++c) {
        const Eigen::Index base = static_cast<Eigen::Index>(c) * cells;
        for (int r = 0; r < res; ++r) {
          for (int col = 0; col < res; ++col) {
            int sr = 0, sc = 0;
            grid::source_cell(r, col, res, k, flip, sr, sc);
            out.obs[ti](base + r * res + col, b) = batch.obs[ti](base + sr * res + sc, b);
          }
        }
        if (batch.channels[c] == Channel::heightfield && config.obs_noise_std > 0) {
          for (int i = 0; i < cells; ++i) out.obs[ti](base + i, b) += static_cast<T>(rng.normal(0, config.obs_noise_std));
        }
      }
      const auto a = batch.actions[ti].col(b).template cast<real>();
      const PickPlaceAction ta = transform_action(PickPlaceAction::from_vector(a), k, flip);
      out.actions[ti].col(b) = ta.as_vector().template cast<T>();
    }
  }
  return out;
}

SequenceBatch<real> sample_batch(const Dataset& dataset, int batch_size, int length, std::uint64_t seed) {
  if (dataset.episodes.empty()) throw ContractError("dataset is empty");
  if (length < 2) throw ContractError("sequence length must be >= 2");
  const int T1 = dataset.header.steps + 1;
  if (length > T1)
    throw ContractError("sequence length " + std::to_string(length) + " exceeds the dataset's " + std::to_string(T1) +
                        " observations per episode");
  SequenceBatch<real> b;
  b.resolution = dataset.header.resolution;
  b.channels = dataset.header.channels;
  const Eigen::Index rows = dataset.header.obs_size();
  for (int t = 0; t < length; ++t) {
    b.obs.emplace_back(rows, batch_size);
    b.actions.emplace_back(mat::Zero(kActionDim, batch_size));
    b.rewards.emplace_back(mat::Zero(1, batch_size));
  }
  Rng rng(seed);
  for (int j = 0; j < batch_size; ++j) {
    const Episode& e = dataset.episodes[rng.index(dataset.episodes.size())];
    const int start = static_cast<int>(rng.index(static_cast<std::uint64_t>(T1 - length + 1)));
    b.seeds.push_back(rng.next());
    for (int t = 0; t < length; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      b.obs[ti].col(j) = e.observations.col(start + t).cast<real>();
      if (t > 0) {
        b.actions[ti].col(j) = e.actions[static_cast<std::size_t>(start + t - 1)].as_vector();
        b.rewards[ti](0, j) = e.rewards[static_cast<std::size_t>(start + t - 1)];
      }
    }
  }
  return b;
}

TrainConfig TrainConfig::from_config(const Config& config) {
  TrainConfig c;
  c.loss = LossConfig::from_config(config);
  c.augment = AugmentConfig::from_config(config);
  c.learning_rate = config.get_double("train.lr");
  c.batch_size = static_cast<int>(config.get_int("train.batch_size"));
  c.seq_len = static_cast<int>(config.get_int("train.seq_len"));
  c.grad_clip = config.get_double("train.grad_clip");
  c.steps = config.get_int("train.steps");
  c.checkpoint_every = config.get_int("train.checkpoint_every");
  c.log_every = config.get_int("train.log_every");
  c.seed = static_cast<std::uint64_t>(config.get_int("train.seed"));
  if (c.seq_len < 2) throw ConfigError("train.seq_len must be >= 2");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(c.learning_rate >= 0)) throw ConfigError("train.lr must be >= 0");
  if (!(c.grad_clip > 0)) throw ConfigError("train.grad_clip must be > 0");
  if (c.steps < 0 || c.checkpoint_every < 0 || c.log_every < 1) throw ConfigError("train step counts out of range");
  return c;
}

TrainState TrainState::fresh(const ModelDims& dims, std::uint64_t seed, real init_scale) {
  TrainState s;
  s.params = ModelParams<real>::init(dims, seed, init_scale);
  s.adam_m = ModelParams<real>::zeros(dims);
  s.adam_v = ModelParams<real>::zeros(dims);
  return s;
}

LossRecord train_step(TrainState& state, const Dataset& dataset, const TrainConfig& config) {
  const auto step = static_cast<std::uint64_t>(state.step);
  const SequenceBatch<real> raw = sample_batch(dataset, config.batch_size, config.seq_len, derive_seed(config.seed, {step, 0}));
  const SequenceBatch<real> batch = augment_batch(raw, config.augment, derive_seed(config.seed, {step, 1}));
  ModelParams<real> grad = ModelParams<real>::zeros(state.params.dims);
  LossRecord rec;
  rec.step = state.step + 1;
  rec.loss = rssm_loss(state.params, batch, config.loss, &grad);

  auto g = grad.tensors();
  real sq = 0;
  for (auto& [name, t] : g) {
    if (!t->allFinite()) throw NumericError("non-finite gradient in " + name);
    sq += t->squaredNorm();
  }
  rec.grad_norm = std::sqrt(sq);
  const real clip = rec.grad_norm > config.grad_clip ? config.grad_clip / rec.grad_norm : 1.0;

  constexpr real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const real t1 = static_cast<real>(state.step + 1);
  const real c1 = 1 - std::pow(beta1, t1);
  const real c2 = 1 - std::pow(beta2, t1);
  auto p = state.params.tensors();
  auto m = state.adam_m.tensors();
  auto v = state.adam_v.tensors();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const mat gi = clip * *g[i].second;
    *m[i].second = beta1 * *m[i].second + (1 - beta1) * gi;
    *v[i].second = beta2 * *v[i].second + (1 - beta2) * gi.cwiseAbs2();
    const mat update = (m[i].second->array() / c1) / ((v[i].second->array() / c2).sqrt() + eps);
    *p[i].second -= config.learning_rate * update;
  }
  ++state.step;
  return rec;
}

std::vector<LossRecord> train(TrainState& state, const Dataset& dataset, const TrainConfig& config,
                              const TrainCallbacks& callbacks) {
  if (dataset.episodes.empty()) throw ContractError("cannot train on an empty dataset");
  std::vector<LossRecord> log;
  while (state.step < config.steps) {
    const LossRecord r = train_step(state, dataset, config);
    log.push_back(r);
    if (callbacks.on_log && r.step % config.log_every == 0) callbacks.on_log(r);
    if (callbacks.on_checkpoint && config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0)
      callbacks.on_checkpoint(state);
  }
  return log;
}

std::string loss_csv_header() { return "step,obs_loss,reward_loss,prior_reward_loss,kl_loss,total"; }

std::string loss_csv_row(const LossRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.loss.obs, r.loss.reward,
                r.loss.prior_reward, r.loss.kl, r.loss.total);
  return buf;
}

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'R', 'S', 'S', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_tensor(std::ostream& out, const std::string& name, const mat& t) {
  binio::put_string(out, name);
  binio::put<std::uint32_t>(out, 2);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
  binio::put_array(out, t.data(), static_cast<std::size_t>(t.size()));
}

} // namespace

void write_checkpoint(const std::filesystem::path& path, const TrainState& state, const Config& config) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic.data(), 4);
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put_string(out, config.to_text());
  std::vector<std::pair<std::string, mat>> all;
  for (const auto& [name, t] : state.params.tensors()) all.emplace_back("model." + name, *t);
  for (const auto& [name, t] : state.adam_m.tensors()) all.emplace_back("adam.m." + name, *t);
  for (const auto& [name, t] : state.adam_v.tensors()) all.emplace_back("adam.v." + name, *t);
  all.emplace_back("train.step", mat::Constant(1, 1, static_cast<real>(state.step)));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, t] : all) put_tensor(out, name, t);
  out.flush();
  if (!out) throw Error("write failed for " + path.string());
}

std::pair<Config, TrainState> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError("cannot open checkpoint " + path.string());
  binio::Reader in(file);
  std::array<char, 4> magic{};
  in.bytes(magic.data(), 4);
  if (magic != kCheckpointMagic) throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
  in.context("config echo");
  Config config;
  try {
    config = Config::parse(in.get_string(), path.string());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config echo is invalid: ") + e.what());
  }
  const ModelDims dims = ModelDims::from_config(config);
  TrainState state;
  state.params = ModelParams<real>::zeros(dims);
  state.adam_m = ModelParams<real>::zeros(dims);
  state.adam_v = ModelParams<real>::zeros(dims);
  std::map<std::string, mat*> slots;
  for (auto& [name, t] : state.params.tensors()) slots["model." + name] = t;
  for (auto& [name, t] : state.adam_m.tensors()) slots["adam.m." + name] = t;
  for (auto& [name, t] : state.adam_v.tensors()) slots["adam.v." + name] = t;
  mat step(1, 1);
  slots["train.step"] = &step;
  in.context("tensor table");
  const auto count = in.get<std::uint32_t>();
  if (count != slots.size()) throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                                               std::to_string(slots.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    in.context("tensor " + std::to_string(i));
    const std::string name = in.get_string(4096);
    in.context("tensor " + name);
    const auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unexpected tensor '" + name + "' in checkpoint");
    const auto rank = in.get<std::uint32_t>();
    if (rank != 2) throw FormatError("tensor '" + name + "' has rank " + std::to_string(rank));
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    mat& dst = *it->second;
    if (rows != dst.rows() || cols != dst.cols()) throw FormatError("tensor '" + name + "' has the wrong shape");
    in.get_array(dst.data(), static_cast<std::size_t>(dst.size()));
    slots.erase(it);
  }
  in.context("trailer");
  if (!in.at_end()) throw FormatError("trailing bytes in checkpoint " + path.string());
  state.step = static_cast<long>(step(0, 0));
  return {std::move(config), std::move(state)};
}

#define CLOTHPICK_INSTANTIATE(T)                                                                                     \
  template struct ModelParams<T>;                                                                                    \
  template struct Latent<T>;                                                                                         \
  template struct SequenceBatch<T>;                                                                                  \
  template vector<T> model_input<T>(const ModelDims&, const Observation&);                                           \
  template matrix<T> standard_normal<T>(int, int, std::uint64_t);                                                    \
  template Latent<T> posterior_step<T>(const ModelParams<T>&, const Latent<T>&, const matrix<T>&, const matrix<T>&, \
                                       const matrix<T>&);                                                            \
  template Latent<T> prior_step<T>(const ModelParams<T>&, const Latent<T>&, const matrix<T>&, const matrix<T>&);    \
  template std::pair<matrix<T>, matrix<T>> decode<T>(const ModelParams<T>&, const Latent<T>&);                       \
  template matrix<T> predict_reward_prior<T>(const ModelParams<T>&, const Latent<T>&);                               \
  template matrix<T> predict_reward_posterior<T>(const ModelParams<T>&, const Latent<T>&);                           \
  template matrix<T> kl_divergence<T>(const matrix<T>&, const matrix<T>&, const matrix<T>&, const matrix<T>&);       \
  template KlBalanced<T> kl_balanced<T>(const matrix<T>&, const matrix<T>&, const matrix<T>&, const matrix<T>&, T, T); \
  template std::pair<matrix<T>, matrix<T>> sequence_noise<T>(std::uint64_t, int, int);                               \
  template LossBreakdown rssm_loss<T>(const ModelParams<T>&, const SequenceBatch<T>&, const LossConfig&,             \
                                      ModelParams<T>*);                                                              \
  template SequenceBatch<T> augment_batch<T>(const SequenceBatch<T>&, const AugmentConfig&, std::uint64_t);

CLOTHPICK_INSTANTIATE(double)
CLOTHPICK_INSTANTIATE(float)

template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

} // namespace clothpick
