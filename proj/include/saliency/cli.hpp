#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saliency/attribution.hpp"
#include "saliency/config.hpp"

namespace saliency {

/// Exit codes shared by every subcommand.
enum ExitCode : int { exit_ok = 0, exit_internal = 1, exit_config = 2, exit_insufficient = 3 };

/// One explain/evaluate method, e.g. "activity:3" or "fullgrad:per-layer".
struct MethodSpec {
  std::string name;  // as written
  std::string kind;  // gradient, gxi, activity, bias, fullgrad, agg, gradcam, oracle, random, shuffled-oracle
  std::size_t layer = 0;
  Granularity granularity = Granularity::per_layer;
};

/// Parses a method name; `depth` bounds layer arguments. Throws ConfigError
/// naming `key` and listing the valid names.
MethodSpec parse_method(const std::string& text, std::size_t depth, bool allow_reference, const std::string& key);

/// Input-sized saliency for an attribution method on an analysed image.
/// Warnings are appended to `warnings`.
SaliencyMap method_saliency(const Explanation& e, const MethodSpec& m, std::vector<std::string>* warnings = nullptr);

/// File-name-safe form of a method name.
std::string method_slug(const std::string& name);

struct RunSettings {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path out_root = "runs";
};

struct RunOutcome {
  std::filesystem::path run_dir;
  nlohmann::json manifest;
};

/// Executes a subcommand into a fresh timestamped folder below
/// settings.out_root and writes its run_manifest.json.
RunOutcome run_command(const std::string& command, const Config& config, const RunSettings& settings,
                       std::ostream& log);

/// Re-runs a manifest and compares every artifact checksum. Returns the
/// names of mismatching or missing artifacts (empty on success).
std::vector<std::string> replay_manifest(const std::filesystem::path& manifest_path,
                                         const std::filesystem::path& out_root, std::ostream& log,
                                         RunOutcome* replayed = nullptr);

/// Entry point behind the `saliency` executable.
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace saliency
