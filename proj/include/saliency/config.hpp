#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace saliency {

/// Bad, unknown or missing configuration key. `key()` is "section.name".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct KeySpec {
  std::string section;
  std::string name;
  std::string fallback;  // empty with `required` set means the key must be given
  std::string help;
  bool required = false;
  bool path = false;  // resolved against the config file directory
};

/// Every accepted key, in documentation order.
const std::vector<KeySpec>& config_keys();

/// Help text listing the keys of one section with their defaults.
std::string config_help(const std::string& section);

/// Sectioned key-value configuration read from an INI file. Unknown keys are
/// rejected and path-valued keys are stored as absolute paths.
class Config {
 public:
  Config() = default;
  static Config load(const std::string& path);
  static Config from_json(const nlohmann::json& snapshot);

  bool has(const std::string& section, const std::string& name) const;
  std::string get(const std::string& section, const std::string& name) const;
  double get_double(const std::string& section, const std::string& name) const;
  std::size_t get_size(const std::string& section, const std::string& name) const;
  std::uint64_t get_u64(const std::string& section, const std::string& name) const;
  bool get_bool(const std::string& section, const std::string& name) const;
  std::vector<std::string> get_list(const std::string& section, const std::string& name) const;
  std::vector<double> get_doubles(const std::string& section, const std::string& name) const;
  std::vector<std::size_t> get_sizes(const std::string& section, const std::string& name) const;

  void set(const std::string& section, const std::string& name, const std::string& value);

  /// Explicit values only, as {section: {key: value}}.
  nlohmann::json to_json() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> values_;
};

}  // namespace saliency
