#ifndef CLOTHPICK_RSSM_HPP
#define CLOTHPICK_RSSM_HPP

#include "clothpick/action.hpp"
#include "clothpick/eigen.hpp"
#include "clothpick/env.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace clothpick {

class Config;
struct Dataset;

constexpr int kActionDim = 4;

struct ModelDims {
  int deter = 64;  // H
  int stoch = 16;  // Z
  int hidden = 128;
  int embed = 128;
  int resolution = 32;
  std::vector<Channel> input_channels{Channel::heightfield};
  std::vector<Channel> output_channels{Channel::mask};
  real min_std = 1e-3;

  int input_size() const { return static_cast<int>(input_channels.size()) * resolution * resolution; }
  int output_size() const { return static_cast<int>(output_channels.size()) * resolution * resolution; }
  bool decodes(Channel c) const;

  static ModelDims from_config(const Config& config);
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

template <class T>
struct Dense {
  matrix<T> w; // out x in
  matrix<T> b; // out x 1
};

// ELU between layers, linear output.
template <class T>
using Mlp = std::vector<Dense<T>>;

// Gated recurrent cell. Gate rows are stacked [reset; update; candidate].
template <class T>
struct Gru {
  matrix<T> wx, wh, bx, bh;
};

template <class T>
struct ModelParams {
  ModelDims dims;
  Mlp<T> encoder;          // obs -> embed
  Gru<T> cell;             // ([z, a], h) -> h
  Mlp<T> posterior;        // [h, embed] -> [mean, raw std]
  Mlp<T> prior;            // h -> [mean, raw std]
  Mlp<T> decoder;          // [h, z] -> output grids
  Mlp<T> reward_posterior; // [h, z] -> r
  Mlp<T> reward_prior;     // [h, z~] -> r

  static ModelParams zeros(const ModelDims& dims);
  // Uniform fan-in/fan-out initialisation scaled by `scale`; biases zero.
  static ModelParams init(const ModelDims& dims, std::uint64_t seed, real scale = 1);

  std::vector<std::pair<std::string, matrix<T>*>> tensors();
  std::vector<std::pair<std::string, const matrix<T>*>> tensors() const;

  std::size_t parameter_count() const;
  // Recurrent cell plus posterior and prior heads.
  std::size_t transition_parameter_count() const;

  void set_zero();
  template <class U>
  ModelParams<U> cast() const;
};

// A batch of latent states, one per column: h (H x N), z statistics and sample (Z x N).
template <class T>
struct Latent {
  matrix<T> h, mean, std, z;

  static Latent zeros(const ModelDims& dims, int n = 1);
  int size() const { return static_cast<int>(h.cols()); }
  Latent column(int i) const;
  friend bool operator==(const Latent&, const Latent&) = default;
};

using LatentState = Latent<real>;

// Selects the model's input channels from an observation as a column.
template <class T>
vector<T> model_input(const ModelDims& dims, const Observation& obs);

// Standard normal Z x N noise drawn from `seed`, column by column.
template <class T>
matrix<T> standard_normal(int rows, int cols, std::uint64_t seed);

// Batched steps. `actions` is 4 x N, `inputs` is input_size x N, `noise` Z x N.
template <class T>
Latent<T> posterior_step(const ModelParams<T>& params, const Latent<T>& prev, const matrix<T>& actions,
                         const matrix<T>& inputs, const matrix<T>& noise);
template <class T>
Latent<T> prior_step(const ModelParams<T>& params, const Latent<T>& prev, const matrix<T>& actions,
                     const matrix<T>& noise);

LatentState posterior_step(const ModelParams<real>& params, const LatentState& prev, const PickPlaceAction& action,
                           const Observation& obs, std::uint64_t noise_seed);
LatentState prior_step(const ModelParams<real>& params, const LatentState& prev, const PickPlaceAction& action,
                       std::uint64_t noise_seed);

// Decoder means (output_size x N) and posterior-head rewards (1 x N).
template <class T>
std::pair<matrix<T>, matrix<T>> decode(const ModelParams<T>& params, const Latent<T>& latent);
// Prior-head reward (1 x N) for latents produced by prior_step.
template <class T>
matrix<T> predict_reward_prior(const ModelParams<T>& params, const Latent<T>& latent);

// Posterior-head reward (1 x N) on any latent, e.g. prior rollouts when the
// prior head is not trained.
template <class T>
matrix<T> predict_reward_posterior(const ModelParams<T>& params, const Latent<T>& latent);

Observation decode_observation(const ModelParams<real>& params, const LatentState& latent);
real predict_reward_prior(const ModelParams<real>& params, const LatentState& latent);
// Decoded mask channel (first column) thresholded at `threshold`; ContractError without a mask output.
Mask predict_mask(const ModelParams<real>& params, const LatentState& latent, real threshold = 0);

// Diagonal-Gaussian KL(q || p), summed over rows, one value per column.
template <class T>
matrix<T> kl_divergence(const matrix<T>& q_mean, const matrix<T>& q_std, const matrix<T>& p_mean,
                        const matrix<T>& p_std);

template <class T>
struct KlBalanced {
  T value = 0;                    // mean over columns of max(kl, free_nats)
  matrix<T> d_q_mean, d_q_std;    // (1 - alpha) share; zero where clipped
  matrix<T> d_p_mean, d_p_std;    // alpha share; zero where clipped
};

// alpha * KL(sg(q) || p) + (1 - alpha) * KL(q || sg(p)). Gradients are of
// the returned value with the stop-gradients applied.
template <class T>
KlBalanced<T> kl_balanced(const matrix<T>& q_mean, const matrix<T>& q_std, const matrix<T>& p_mean,
                          const matrix<T>& p_std, T alpha, T free_nats = 0);

struct LossConfig {
  real alpha = 0.8;
  bool kl_balancing = true;
  real free_nats = 3.0;
  real w_obs = 1, w_reward = 1, w_kl = 1, w_prior_reward = 1;

  static LossConfig from_config(const Config& config);
};

struct LossBreakdown {
  real obs = 0, reward = 0, prior_reward = 0, kl = 0, total = 0;
};

// Length-L sequences, one per column. Step 0 carries the zero "previous
// action" and its reward is ignored.
template <class T>
struct SequenceBatch {
  int resolution = 0;
  std::vector<Channel> channels;
  std::vector<matrix<T>> obs;     // L of (channels*res*res x B)
  std::vector<matrix<T>> actions; // L of (4 x B)
  std::vector<matrix<T>> rewards; // L of (1 x B)
  std::vector<std::uint64_t> seeds; // per-sequence noise seeds

  int length() const { return static_cast<int>(obs.size()); }
  int batch() const { return static_cast<int>(seeds.size()); }
  void validate() const;
};

// Posterior and prior noise (each Z x L) for one sequence.
template <class T>
std::pair<matrix<T>, matrix<T>> sequence_noise(std::uint64_t seed, int stoch, int length);

// Means over batch and time: obs is the per-sample squared error summed over
// cells; reward terms skip step 0. With `grad`, accumulates into it.
template <class T>
LossBreakdown rssm_loss(const ModelParams<T>& params, const SequenceBatch<T>& batch, const LossConfig& config,
                        ModelParams<T>* grad = nullptr);

struct AugmentConfig {
  bool rotate = true;
  bool vflip = true;
  real obs_noise_std = 0.02;

  static AugmentConfig from_config(const Config& config);
};

// Per sequence: k quarter turns (uniform) and a vertical flip (p = 0.5) of
// every grid and action, then Gaussian noise on heightfield cells only.
template <class T>
SequenceBatch<T> augment_batch(const SequenceBatch<T>& batch, const AugmentConfig& config, std::uint64_t seed);

PickPlaceAction transform_action(const PickPlaceAction& a, int quarter_turns, bool vflip);

// Random length-L windows from the dataset. Model channels must be present.
SequenceBatch<real> sample_batch(const Dataset& dataset, int batch_size, int length, std::uint64_t seed);

struct TrainConfig {
  LossConfig loss;
  AugmentConfig augment;
  real learning_rate = 3e-4;
  int batch_size = 16;
  int seq_len = 10;
  real grad_clip = 100;
  long steps = 5000;
  long checkpoint_every = 1000;
  long log_every = 1;
  std::uint64_t seed = 1;

  static TrainConfig from_config(const Config& config);
};

struct TrainState {
  ModelParams<real> params;
  ModelParams<real> adam_m, adam_v;
  long step = 0;

  static TrainState fresh(const ModelDims& dims, std::uint64_t seed, real init_scale = 1);
};

struct LossRecord {
  long step = 0;
  LossBreakdown loss;
  real grad_norm = 0;
};

struct TrainCallbacks {
  std::function<void(const LossRecord&)> on_log;
  std::function<void(const TrainState&)> on_checkpoint;
};

// One Adam update on a freshly sampled batch; returns the pre-update loss.
LossRecord train_step(TrainState& state, const Dataset& dataset, const TrainConfig& config);
// Runs until state.step == config.steps.
std::vector<LossRecord> train(TrainState& state, const Dataset& dataset, const TrainConfig& config,
                              const TrainCallbacks& callbacks = {});

std::string loss_csv_header();
std::string loss_csv_row(const LossRecord& r);

void write_checkpoint(const std::filesystem::path& path, const TrainState& state, const Config& config);
// Returns the echoed config and the state; FormatError on any mismatch.
std::pair<Config, TrainState> read_checkpoint(const std::filesystem::path& path);

} // namespace clothpick

#endif
