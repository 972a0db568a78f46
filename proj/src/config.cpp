#include "clothpick/config.hpp"

#include "clothpick/errors.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace clothpick {

namespace {

// Desk-scale defaults. Full-scale planner values (population 5000, 100
// iterations) are reachable by overriding plan.population / plan.iterations.
const std::map<std::string, std::string>& default_entries() {
  static const std::map<std::string, std::string> table = {
      // simulator
      {"sim.dt", "0.005"},
      {"sim.gravity", "9.8"},
      {"sim.k_structural", "800"},
      {"sim.k_shear", "400"},
      {"sim.k_bend", "20"},
      {"sim.damping", "2.0"},
      {"sim.ground_friction", "1.0"},
      {"sim.particle_mass", "0.2"},
      {"sim.settle_steps", "1000"},
      {"sim.settle_velocity_eps", "0.01"},
      {"sim.grasp_radius", "0.03"},
      {"sim.lift_height", "0.12"},
      {"sim.lift_steps", "20"},
      {"sim.picker_speed", "1.0"},
      {"sim.thickness", "0.02"},
      {"sim.contact_radius", "0.075"},
      {"sim.contact_stiffness", "800"},
      {"sim.contact_damping", "10"},
      // cloth instance generation
      {"cloth.rows", "8"},
      {"cloth.cols", "8"},
      {"cloth.spacing", "0.1"},
      {"cloth.max_translation", "0.15"},
      {"cloth.max_rotation_deg", "180"},
      {"crumple.folds_tier0", "0,1"},
      {"crumple.folds_tier1", "1,2"},
      {"crumple.folds_tier2", "2,5"},
      {"crumple.folds_tier3", "5,10"},
      {"crumple.folds_tier4", "10,12"},
      {"crumple.folds_any", "0,12"},
      {"crumple.min_offset", "0.15"},
      {"crumple.min_scale", "1.0"},
      {"crumple.max_scale", "2.0"},
      {"crumple.max_angle", "1.0"},
      // observation
      {"obs.resolution", "32"},
      {"obs.channels", "heightfield,mask"},
      {"obs.z_max", "0.2"},
      // reward
      {"reward.kind", "clothpick"},
      {"reward.tau_high", "0.95"},
      {"reward.eps_flat", "0.01"},
      {"reward.large_action", "0.7"},
      {"reward.penalty", "0.5"},
      {"reward.bonus", "0.5"},
      // environment
      {"env.max_steps", "20"},
      {"env.coverage_resolution", "64"},
      {"env.tier_attempts", "100"},
      // latent model
      {"model.deter", "64"},
      {"model.stoch", "16"},
      {"model.hidden", "128"},
      {"model.embed", "128"},
      {"model.input_channels", "heightfield"},
      {"model.output_channels", "mask"},
      {"model.min_std", "0.001"},
      {"model.init_scale", "1.0"},
      // training
      {"train.alpha", "0.8"},
      {"train.kl_balancing", "true"},
      {"train.free_nats", "3.0"},
      {"train.lr", "0.0003"},
      {"train.batch_size", "16"},
      {"train.seq_len", "10"},
      {"train.grad_clip", "100"},
      {"train.rotate", "true"},
      {"train.vflip", "true"},
      {"train.obs_noise_std", "0.02"},
      {"train.w_obs", "1.0"},
      {"train.w_reward", "1.0"},
      {"train.w_kl", "1.0"},
      {"train.w_prior_reward", "1.0"},
      {"train.steps", "5000"},
      {"train.checkpoint_every", "1000"},
      {"train.log_every", "1"},
      {"train.seed", "1"},
      {"train.data_fraction", "1.0"},
      // planner
      {"plan.population", "500"},
      {"plan.iterations", "20"},
      {"plan.elite_fraction", "0.1"},
      {"plan.horizon", "1"},
      {"plan.mask_source", "environment"},
      {"plan.seed", "0"},
      {"plan.std_floor", "0.001"},
      {"plan.max_rejection_tries", "50"},
      {"plan.reward_head", "prior"},
      // dataset
      {"data.main_episodes", "2000"},
      {"data.high_episodes", "240"},
      {"data.main_weights", "PureRandom:0.10,CornerBiased:0.10,OracleFlatten:0.25,OracleFold:0.15,NoisyExpert:0.30,Mix:0.10"},
      {"data.high_weights", "OracleFlatten:0.2,NoisyExpert:0.2,SmallDrag:0.6"},
      {"data.high_coverage_floor", "0.85"},
      {"data.seed", "0"},
      // evaluation
      {"eval.episodes_per_tier", "20"},
      {"eval.seed", "1000000"},
      {"eval.record_steps", "5,10,20"},
      {"eval.train_steps", "5000"},
      // execution
      {"run.workers", "1"},
      {"run.deterministic", "true"},
  };
  return table;
}

} // namespace

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

Config Config::defaults() {
  Config c;
  c.entries_ = default_entries();
  return c;
}

Config Config::parse(std::string_view text, std::string_view origin) {
  Config c = defaults();
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(std::string(origin) + ":" + std::to_string(lineno) + ": expected `key = value`");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
  if (!default_entries().count(key)) throw ConfigError("unknown config key `" + key + "`");
  entries_[key] = value;
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.entries_) set(k, v);
}

bool Config::has(const std::string& key) const { return entries_.count(key) != 0; }

const std::string& Config::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown config key `" + key + "`");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "` expects a number, got `" + v + "`");
  }
}

long long Config::get_int(const std::string& key) const {
  const std::string& v = get(key);
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw ConfigError("config key `" + key + "` expects an integer, got `" + v + "`");
  return out;
}

bool Config::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key `" + key + "` expects a boolean, got `" + v + "`");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
  const std::string& v = get(key);
  if (trim(v).empty()) return {};
  return split(v, ',');
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t Config::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : to_text()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void Config::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config snapshot " + path.string());
  out << "# resolved configuration\n" << to_text();
}

} // namespace clothpick
