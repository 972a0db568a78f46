#include "clothpick/dataset.hpp"

#include "binio.hpp"
#include "clothpick/errors.hpp"

#include <array>
#include <cmath>

namespace clothpick {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'P', 'D', 'S'};

const std::array<const char*, kNumPolicyKinds> kKindNames{"PureRandom", "CornerBiased", "OracleFlatten", "OracleFold",
                                                          "NoisyExpert", "SmallDrag",    "Mix"};

void write_header(std::ostream& out, const DatasetHeader& h) {
  out.write(kMagic.data(), 4);
  binio::put<std::uint32_t>(out, h.version);
  binio::put<std::uint32_t>(out, h.episode_count);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(h.steps));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(h.resolution));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(h.channels.size()));
  for (const Channel c : h.channels) binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(c));
  binio::put<std::uint64_t>(out, h.seed);
}

void check_episode(const DatasetHeader& h, const Episode& e) {
  const std::string where = "episode " + std::to_string(e.index);
  const auto steps = static_cast<std::size_t>(h.steps);
  if (e.actions.size() != steps || e.rewards.size() != steps || e.mispick.size() != steps ||
      e.coverage.size() != steps + 1)
    throw ContractError(where + " does not have " + std::to_string(h.steps) + " transitions");
  if (e.observations.rows() != h.obs_size() || e.observations.cols() != h.steps + 1)
    throw ContractError(where + " has observations of the wrong shape");
  if (e.c_flat <= 0) throw ContractError(where + " has non-positive flat coverage");
  if (!e.observations.allFinite()) throw ContractError(where + " has non-finite observations");
  for (std::size_t t = 0; t < steps; ++t) {
    if (!std::isfinite(e.rewards[t]) || !e.actions[t].in_range())
      throw ContractError(where + " has a non-finite reward or out-of-range action at step " + std::to_string(t));
  }
}

void write_episode(std::ostream& out, const Episode& e) {
  binio::put<std::uint32_t>(out, e.index);
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.kind));
  binio::put<std::uint8_t>(out, e.high_coverage ? 1 : 0);
  binio::put<std::int8_t>(out, static_cast<std::int8_t>(e.tier));
  binio::put<std::uint64_t>(out, e.seed);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.c_flat));
  for (const int c : e.coverage) binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(c));
  for (const PickPlaceAction& a : e.actions) {
    for (const real v : {a.x_pick, a.y_pick, a.x_place, a.y_place}) binio::put<float>(out, static_cast<float>(v));
  }
  binio::put_array(out, e.rewards.data(), e.rewards.size());
  binio::put_array(out, e.mispick.data(), e.mispick.size());
  binio::put_array(out, e.observations.data(), static_cast<std::size_t>(e.observations.size()));
}

Episode read_episode(binio::Reader& in, const DatasetHeader& h, std::uint32_t expected) {
  in.context("episode " + std::to_string(expected));
  Episode e;
  e.index = in.get<std::uint32_t>();
  if (e.index != expected)
    throw FormatError("episode " + std::to_string(expected) + " carries index " + std::to_string(e.index));
  const auto kind = in.get<std::uint8_t>();
  if (kind >= kNumPolicyKinds) throw FormatError("episode " + std::to_string(expected) + " has an unknown policy kind");
  e.kind = static_cast<PolicyKind>(kind);
  e.high_coverage = in.get<std::uint8_t>() != 0;
  e.tier = in.get<std::int8_t>();
  e.seed = in.get<std::uint64_t>();
  e.c_flat = static_cast<int>(in.get<std::uint32_t>());
  const auto steps = static_cast<std::size_t>(h.steps);
  e.coverage.resize(steps + 1);
  for (int& c : e.coverage) c = static_cast<int>(in.get<std::uint32_t>());
  e.actions.resize(steps);
  for (PickPlaceAction& a : e.actions) {
    std::array<float, 4> v{};
    in.get_array(v.data(), 4);
    a = {v[0], v[1], v[2], v[3]};
  }
  e.rewards.resize(steps);
  in.get_array(e.rewards.data(), steps);
  e.mispick.resize(steps);
  in.get_array(e.mispick.data(), steps);
  e.observations.resize(h.obs_size(), h.steps + 1);
  in.get_array(e.observations.data(), static_cast<std::size_t>(e.observations.size()));
  return e;
}

} // namespace

std::string to_string(PolicyKind k) { return kKindNames[static_cast<std::size_t>(k)]; }

PolicyKind parse_policy_kind(const std::string& name) {
  for (int i = 0; i < kNumPolicyKinds; ++i) {
    if (name == kKindNames[static_cast<std::size_t>(i)]) return static_cast<PolicyKind>(i);
  }
  if (name == "Oracle" || name == "Expert") return PolicyKind::OracleFlatten;
  throw ConfigError("unknown policy kind '" + name + "'");
}

void Dataset::validate() const {
  if (header.episode_count != episodes.size()) throw ContractError("dataset header episode count does not match");
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (episodes[i].index != i) throw ContractError("episode " + std::to_string(i) + " is out of order");
    check_episode(header, episodes[i]);
  }
}

DatasetWriter::DatasetWriter(const std::filesystem::path& path, const DatasetHeader& header)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc), header_(header) {
  if (!out_) throw Error("cannot open " + path.string() + " for writing");
  write_header(out_, header_);
}

void DatasetWriter::add(const Episode& episode) {
  if (written_ >= header_.episode_count) throw ContractError("dataset writer received more episodes than declared");
  if (episode.index != written_)
    throw ContractError("dataset writer expected episode " + std::to_string(written_) + ", got " +
                        std::to_string(episode.index));
  check_episode(header_, episode);
  write_episode(out_, episode);
  if (!out_) throw Error("write failed for " + path_.string() + " at episode " + std::to_string(episode.index));
  ++written_;
}

void DatasetWriter::finish() {
  if (written_ != header_.episode_count)
    throw ContractError("dataset writer finished after " + std::to_string(written_) + " of " +
                        std::to_string(header_.episode_count) + " episodes");
  out_.flush();
  if (!out_) throw Error("write failed for " + path_.string());
  out_.close();
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  DatasetHeader h = dataset.header;
  h.episode_count = static_cast<std::uint32_t>(dataset.episodes.size());
  DatasetWriter w(path, h);
  for (const Episode& e : dataset.episodes) w.add(e);
  w.finish();
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError("cannot open dataset " + path.string());
  binio::Reader in(file);
  std::array<char, 4> magic{};
  in.bytes(magic.data(), 4);
  if (magic != kMagic) throw FormatError(path.string() + " is not a dataset file (bad magic)");
  Dataset ds;
  DatasetHeader& h = ds.header;
  h.version = in.get<std::uint32_t>();
  if (h.version != DatasetHeader::kVersion)
    throw FormatError("dataset version " + std::to_string(h.version) + " is not supported (expected " +
                      std::to_string(DatasetHeader::kVersion) + ")");
  h.episode_count = in.get<std::uint32_t>();
  h.steps = static_cast<int>(in.get<std::uint32_t>());
  h.resolution = static_cast<int>(in.get<std::uint32_t>());
  const auto nch = in.get<std::uint32_t>();
  if (h.steps <= 0 || h.steps > 100000 || h.resolution <= 0 || h.resolution > 4096 || nch == 0 || nch > 2)
    throw FormatError("dataset header has implausible dimensions");
  for (std::uint32_t i = 0; i < nch; ++i) {
    const auto c = in.get<std::uint8_t>();
    if (c > 1) throw FormatError("dataset header has an unknown channel");
    h.channels.push_back(static_cast<Channel>(c));
  }
  h.seed = in.get<std::uint64_t>();
  ds.episodes.reserve(h.episode_count);
  for (std::uint32_t i = 0; i < h.episode_count; ++i) ds.episodes.push_back(read_episode(in, h, i));
  in.context("trailer");
  if (!in.at_end()) throw FormatError("trailing bytes after the last episode in " + path.string());
  return ds;
}

Observation episode_observation(const DatasetHeader& header, const Episode& episode, int t) {
  if (t < 0 || t >= episode.observations.cols()) throw ContractError("observation index out of range");
  const int cells = header.resolution * header.resolution;
  Observation o{header.resolution, header.channels, mat(header.channels.size(), cells)};
  for (std::size_t k = 0; k < header.channels.size(); ++k)
    o.data.row(static_cast<Eigen::Index>(k)) =
        episode.observations.col(t).segment(static_cast<Eigen::Index>(k) * cells, cells).transpose().cast<real>();
  return o;
}

} // namespace clothpick
