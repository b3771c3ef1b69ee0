#include "saliency/config.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <sstream>

namespace saliency {

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"run", "seed", "0", "seed for initialisation, shuffling and noise draws (overridden by --seed)"},
      {"run", "workers", "1", "worker threads for per-image work (overridden by --workers)"},
      {"data", "manifest", "", "dataset manifest (INI with [synthetic] or [train]/[test] sections)", true, true},
      {"model", "arch", "vgg-mini", "vgg-mini | resnet-mini | linear"},
      {"model", "channels", "4,8,16", "conv channels per stage (vgg-mini, resnet-mini)"},
      {"model", "bias", "true", "give conv/dense layers a bias"},
      {"model", "batchnorm", "false", "insert frozen batchnorm after each conv (vgg-mini)"},
      {"train", "epochs", "10", "passes over the training split"},
      {"train", "batch_size", "32", "mini-batch size"},
      {"train", "optimizer", "adam", "sgd | adam"},
      {"train", "learning_rate", "0.001", "step size"},
      {"train", "max_steps", "0", "stop after this many steps (0 = no limit)"},
      {"explain", "checkpoint", "", "trained checkpoint", true, true},
      {"explain", "images", "0", "comma-separated test-split indices"},
      {"explain", "methods", "gradient,gxi,fullgrad:per-feature",
       "gradient, gxi, activity:l, bias:l, fullgrad:per-feature, fullgrad:per-layer, agg:l0, gradcam:l"},
      {"explain", "format", "ppm", "heatmap format: ppm | png"},
      {"explain", "zoom", "8", "heatmap magnification"},
      {"evaluate", "checkpoint", "", "trained checkpoint", true, true},
      {"evaluate", "images", "200", "number of leading test-split images to evaluate"},
      {"evaluate", "methods", "oracle,random",
       "explain methods plus oracle (ground-truth mask), random, shuffled-oracle"},
      {"evaluate", "metrics", "de_minus,de_delta", "metrics compared pairwise: e_minus, e_plus, e_delta, de_minus, de_plus, de_delta"},
      {"evaluate", "step_fraction", "0.01", "fraction of pixels removed per step"},
      {"evaluate", "removal_value", "0", "value written into removed pixels"},
      {"evaluate", "max_fraction", "1", "stop removing after this fraction of pixels"},
      {"evaluate", "draws", "10", "noise-pool draws per image"},
      {"decay", "checkpoint", "", "teacher checkpoint", true, true},
      {"decay", "kind", "exponential", "exponential | linear"},
      {"decay", "decay_steps", "200", "number of bias rescales"},
      {"decay", "train_steps", "200", "fine-tuning steps after each rescale"},
      {"decay", "finetune_steps", "0", "extra fine-tuning steps with zero biases"},
      {"decay", "ratio", "0.97", "per-rescale factor of the exponential schedule"},
      {"decay", "temperature", "100", "distillation temperature"},
      {"decay", "optimizer", "adam", "sgd | adam"},
      {"decay", "learning_rate", "5e-6", "fine-tuning step size"},
      {"decay", "batch_size", "64", "fine-tuning mini-batch size"},
      {"robustness", "checkpoint", "", "checkpoint under test", true, true},
      {"robustness", "zero_bias_checkpoint", "", "bias-free counterpart (default: biases zeroed outright)", false, true},
      {"robustness", "scales", "0.001,0.1,1,10,1000", "input scale factors"},
      {"robustness", "shifts", "0", "input shifts"},
  };
  return keys;
}

namespace {

const KeySpec* find_key(const std::string& section, const std::string& name) {
  for (const KeySpec& k : config_keys()) {
    if (k.section == section && k.name == name) return &k;
  }
  return nullptr;
}

std::string qualified(const std::string& section, const std::string& name) { return section + "." + name; }

}  // namespace

std::string config_help(const std::string& section) {
  std::ostringstream out;
  out << "[" << section << "]\n";
  for (const KeySpec& k : config_keys()) {
    if (k.section != section) continue;
    out << "  " << k.name << " = " << (k.required ? "<required>" : k.fallback.empty() ? "<unset>" : k.fallback)
        << "\n      " << k.help << "\n";
  }
  return out.str();
}

Config Config::load(const std::string& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  if (!std::filesystem::exists(path)) throw ConfigError("--config", "file '" + path + "' does not exist");
  try {
    pt::read_ini(path, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("--config", "cannot parse '" + path + "': " + e.message());
  }
  const std::filesystem::path base = std::filesystem::absolute(path).parent_path();
  Config cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section, "keys must live inside a [section]");
    for (const auto& [name, node] : body) {
      const KeySpec* spec = find_key(section, name);
      if (!spec) throw ConfigError(qualified(section, name), "unknown key");
      std::string value = boost::trim_copy(node.data());
      if (spec->path && !value.empty()) {
        const std::filesystem::path p(value);
        value = (p.is_absolute() ? p : base / p).lexically_normal().string();
      }
      cfg.values_[section][name] = value;
    }
  }
  return cfg;
}

Config Config::from_json(const nlohmann::json& snapshot) {
  Config cfg;
  for (const auto& [section, body] : snapshot.items()) {
    for (const auto& [name, value] : body.items()) {
      if (!find_key(section, name)) throw ConfigError(qualified(section, name), "unknown key");
      cfg.values_[section][name] = value.get<std::string>();
    }
  }
  return cfg;
}

bool Config::has(const std::string& section, const std::string& name) const {
  auto s = values_.find(section);
  return s != values_.end() && s->second.count(name) != 0;
}

std::string Config::get(const std::string& section, const std::string& name) const {
  const KeySpec* spec = find_key(section, name);
  if (!spec) throw std::logic_error("undeclared config key " + qualified(section, name));
  if (has(section, name)) {
    const std::string& v = values_.at(section).at(name);
    if (v.empty() && spec->required) throw ConfigError(qualified(section, name), "value is empty");
    return v;
  }
  if (spec->required) throw ConfigError(qualified(section, name), "required key is missing");
  return spec->fallback;
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key, "'" + text + "' is not a valid number");
  }
  return v;
}

}  // namespace

double Config::get_double(const std::string& section, const std::string& name) const {
  return parse_number<double>(qualified(section, name), get(section, name));
}

std::size_t Config::get_size(const std::string& section, const std::string& name) const {
  return parse_number<std::size_t>(qualified(section, name), get(section, name));
}

std::uint64_t Config::get_u64(const std::string& section, const std::string& name) const {
  return parse_number<std::uint64_t>(qualified(section, name), get(section, name));
}

bool Config::get_bool(const std::string& section, const std::string& name) const {
  const std::string v = boost::to_lower_copy(get(section, name));
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(qualified(section, name), "'" + v + "' is not a boolean");
}

std::vector<std::string> Config::get_list(const std::string& section, const std::string& name) const {
  std::vector<std::string> parts, out;
  const std::string v = get(section, name);
  boost::split(parts, v, boost::is_any_of(","));
  for (std::string& p : parts) {
    boost::trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

std::vector<double> Config::get_doubles(const std::string& section, const std::string& name) const {
  std::vector<double> out;
  for (const std::string& p : get_list(section, name)) out.push_back(parse_number<double>(qualified(section, name), p));
  return out;
}

std::vector<std::size_t> Config::get_sizes(const std::string& section, const std::string& name) const {
  std::vector<std::size_t> out;
  for (const std::string& p : get_list(section, name)) {
    out.push_back(parse_number<std::size_t>(qualified(section, name), p));
  }
  return out;
}

void Config::set(const std::string& section, const std::string& name, const std::string& value) {
  if (!find_key(section, name)) throw ConfigError(qualified(section, name), "unknown key");
  values_[section][name] = value;
}

nlohmann::json Config::to_json() const {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [section, body] : values_) {
    for (const auto& [name, value] : body) out[section][name] = value;
  }
  return out;
}

}  // namespace saliency
