#ifndef CLOTHPICK_DATASET_HPP
#define CLOTHPICK_DATASET_HPP

#include "clothpick/action.hpp"
#include "clothpick/eigen.hpp"
#include "clothpick/env.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace clothpick {

enum class PolicyKind : std::uint8_t {
  PureRandom = 0,
  CornerBiased = 1,
  OracleFlatten = 2,
  OracleFold = 3,
  NoisyExpert = 4,
  SmallDrag = 5,
  Mix = 6,
};
constexpr int kNumPolicyKinds = 7;

std::string to_string(PolicyKind k);
PolicyKind parse_policy_kind(const std::string& name);

// One fixed-length trajectory. Observation column t is the state before
// action t; column `steps` is the final state.
struct Episode {
  std::uint32_t index = 0;
  PolicyKind kind = PolicyKind::PureRandom;
  bool high_coverage = false;
  int tier = 0;
  std::uint64_t seed = 0;
  int c_flat = 1;
  std::vector<int> coverage;               // steps + 1
  std::vector<PickPlaceAction> actions;    // steps, float-representable
  std::vector<float> rewards;              // steps
  std::vector<std::uint8_t> mispick;       // steps
  matrix<float> observations;              // channels*res*res x (steps + 1)

  int steps() const { return static_cast<int>(actions.size()); }
  real nc(int t) const { return static_cast<real>(coverage[static_cast<std::size_t>(t)]) / c_flat; }
  friend bool operator==(const Episode&, const Episode&) = default;
};

struct DatasetHeader {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::uint32_t episode_count = 0;
  int steps = 20;
  int resolution = 32;
  std::vector<Channel> channels;
  std::uint64_t seed = 0;

  int obs_size() const { return static_cast<int>(channels.size()) * resolution * resolution; }
  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Episode> episodes;

  // Throws ContractError naming the first malformed episode.
  void validate() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Writes episodes one at a time in index order. The header's episode_count
// must match the number of add() calls before finish().
class DatasetWriter {
public:
  DatasetWriter(const std::filesystem::path& path, const DatasetHeader& header);
  void add(const Episode& episode);
  void finish();

private:
  std::filesystem::path path_;
  std::ofstream out_;
  DatasetHeader header_;
  std::uint32_t written_ = 0;
};

// Observation column t of an episode, converted back to double.
Observation episode_observation(const DatasetHeader& header, const Episode& episode, int t);

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
// Throws FormatError on bad magic, version mismatch or truncation.
Dataset read_dataset(const std::filesystem::path& path);

} // namespace clothpick

#endif
