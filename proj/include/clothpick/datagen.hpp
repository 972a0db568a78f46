#ifndef CLOTHPICK_DATAGEN_HPP
#define CLOTHPICK_DATAGEN_HPP

#include "clothpick/action.hpp"
#include "clothpick/clothsim.hpp"
#include "clothpick/dataset.hpp"
#include "clothpick/env.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace clothpick {

class Config;
class Rng;

struct PolicyParams {
  real corner_jitter = 0.05; // corner-biased pick std
  real expert_noise = 0.1;   // noisy expert pick perturbation bound per axis
  real drag_offset = 0.1;    // small-drag place offset bound per axis
  real fold_noise = 0.1;     // noisy fold perturbation bound per axis
};

// What a scripted policy may look at. Oracle policies use ground truth.
struct PolicyInput {
  const ClothState& state;
  const ClothState& flat; // the episode's canonical flat pose
  const Observation& observation;
  real depth_threshold = 0;
};

PickPlaceAction pure_random_policy(Rng& rng);
PickPlaceAction corner_biased_policy(const PolicyInput& in, Rng& rng, real jitter);
// Corner with the largest displacement from its flat target (ties: lowest
// index), placed on that target.
PickPlaceAction oracle_flatten_policy(const PolicyInput& in);
PickPlaceAction noisy_expert_policy(const PolicyInput& in, Rng& rng, real noise);
// Pick uniform over the positive cells of the observation's mask; falls back
// to a random action when the mask is empty.
PickPlaceAction small_drag_policy(const PolicyInput& in, Rng& rng, real offset);

enum class FoldVariant : std::uint8_t { expert, noisy, random };
// Picks a corner and places it on the opposite corner or the centroid.
// `random` targets another random corner instead of the opposite one.
PickPlaceAction fold_policy(const PolicyInput& in, Rng& rng, FoldVariant variant, real noise);

// Kind used by the Mix policy for a given step seed.
PolicyKind mix_choice(std::uint64_t seed);

// Action of `kind` as a function of the input and `seed`. Mix delegates to
// mix_choice(seed) with derive_seed(seed, {1}).
PickPlaceAction policy_action(PolicyKind kind, const PolicyInput& in, std::uint64_t seed,
                              const PolicyParams& params = {});

using KindWeights = std::vector<std::pair<PolicyKind, real>>;
// "Kind:weight,Kind:weight"
KindWeights parse_kind_weights(const std::string& text);

// Largest-remainder apportionment of `total` over the weights; remainder ties
// go to the earlier entry.
std::vector<int> apportion(const KindWeights& weights, int total);

struct MixtureSpec {
  int main_episodes = 2000;
  KindWeights main_weights;
  int high_episodes = 240;
  KindWeights high_weights;
  real high_coverage_floor = 0.85;

  void validate() const;
  static MixtureSpec from_config(const Config& config);
};

struct Manifest {
  std::array<int, kNumPolicyKinds> main{};
  std::array<int, kNumPolicyKinds> high{};
};

// Policy kind of every episode: main block first, then the high-coverage
// block, each shuffled with the seed.
std::vector<std::pair<PolicyKind, bool>> episode_plan(const MixtureSpec& spec, std::uint64_t seed);

// One episode from its index, kind and block. Deterministic in (env params,
// seed, index).
Episode generate_episode(const EnvParams& env_params, std::uint32_t index, PolicyKind kind, bool high_coverage,
                         real high_coverage_floor, std::uint64_t seed, const PolicyParams& policy = {});

struct GenerateOptions {
  int workers = 1;
  PolicyParams policy;
  std::function<void(int done, int total)> on_progress;
};

// Streams the dataset to `path` in episode order and returns the counts.
Manifest generate_dataset(const std::filesystem::path& path, const MixtureSpec& spec, const EnvParams& env_params,
                          std::uint64_t seed, const GenerateOptions& options = {});

// kind,count rows for the main block, then high:kind,count for the high-coverage block.
std::string manifest_csv(const Manifest& manifest);

} // namespace clothpick

#endif
