#ifndef CLOTHPICK_CONFIG_HPP
#define CLOTHPICK_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace clothpick {

// Flat `key = value` configuration. Every key the project understands has a
// default; setting an unknown key is a ConfigError.
//
// Grammar: one `key = value` per line, `#` starts a comment, blank lines are
// ignored, surrounding whitespace is trimmed. Keys are dotted lowercase names.
class Config {
public:
  static Config defaults();

  // Parses text on top of the defaults. `origin` is used in error messages.
  static Config parse(std::string_view text, std::string_view origin = "<text>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void merge(const Config& other);
  bool has(const std::string& key) const;

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Sorted `key = value` lines; parse(to_text()) reproduces this config.
  std::string to_text() const;
  // FNV-1a of to_text(); identifies a resolved configuration.
  std::uint64_t hash() const;

  void save(const std::filesystem::path& path) const;

private:
  std::map<std::string, std::string> entries_;
};

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

} // namespace clothpick

#endif
