#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "saliency/dataset.hpp"
#include "saliency/network.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

/// Too few usable samples for a statistic.
class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every paired difference is zero, so a test carries no signal.
class DegenerateComparisonError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Direction { least_first, most_first };

struct PerturbConfig {
  Direction direction = Direction::least_first;
  double step_fraction = 0.01;
  double removal_value = 0.0;
  double max_fraction = 1.0;

  void validate() const;
};

struct PerturbResult {
  double e = 1.0;
  bool flipped = false;
  std::size_t steps = 0;
  /// e after each removal batch, filled on request.
  std::vector<double> trajectory;
};

/// Pixel indices (row-major) in removal order. Ties keep row-major order.
std::vector<std::size_t> removal_order(const Tensor& saliency, Direction direction);

/// Removes pixels in saliency order until the predicted class changes and
/// returns e = 1 - |x_s| / |x| at the first flipped image.
PerturbResult perturb_until_flip(const Checkpoint& ckpt, const Tensor& x, const Tensor& saliency,
                                 const PerturbConfig& config, bool record_trajectory = false);

struct PoolEntry {
  std::size_t image_id = 0;
  Tensor map;
};

/// Saliency maps of one method over many images, used as distribution-matched noise.
class NoisePool {
 public:
  NoisePool() = default;
  explicit NoisePool(std::vector<PoolEntry> entries) : entries_(std::move(entries)) {}

  void add(std::size_t image_id, Tensor map) { entries_.push_back({image_id, std::move(map)}); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<PoolEntry>& entries() const { return entries_; }
  /// Pool without the maps belonging to `image_id`.
  NoisePool excluding(std::size_t image_id) const;

 private:
  std::vector<PoolEntry> entries_;
};

/// `count` distinct indices below `n`, by partial Fisher-Yates on raw engine output.
std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t count, std::uint64_t seed);

/// Mean e over `draws` distinct pool maps.
double noise_reference(const Checkpoint& ckpt, const Tensor& x, const NoisePool& pool,
                       const PerturbConfig& config, std::size_t draws, std::uint64_t seed);

/// Per-image seed derived from a run seed (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t id);

// Reference maps for sanity checks of the protocol.
/// i.i.d. uniform [0, 1) values.
Tensor uniform_random_map(std::size_t height, std::size_t width, std::uint64_t seed);
/// Random pixel permutation of `map`; keeps its value histogram.
Tensor shuffled_pixels(const Tensor& map, std::uint64_t seed);

struct EvalRecord {
  std::size_t image_id = 0;
  std::string method;
  double e_minus = 0.0, e_plus = 0.0, e_delta = 0.0;
  double exi_minus = 0.0, exi_plus = 0.0;
  double de_minus = 0.0, de_plus = 0.0, de_delta = 0.0;
  bool flipped_minus = false, flipped_plus = false;
  std::size_t steps_minus = 0, steps_plus = 0;
  /// Set when the image could not be evaluated; metrics are NaN then.
  std::string error;

  bool ok() const { return error.empty(); }
};

/// Produces an input-sized saliency map for dataset image `image_id`.
using SaliencyMethod = std::function<Tensor(const Tensor& x, std::size_t image_id)>;

struct EvalOptions {
  PerturbConfig perturb;  // direction is ignored; both are evaluated
  std::size_t draws = 10;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// Full metric set for every image in `image_ids`. The noise pool holds the
/// method's maps for the other evaluated images.
std::vector<EvalRecord> evaluate_method(const Checkpoint& ckpt, const Dataset& data,
                                        std::span<const std::size_t> image_ids, const std::string& name,
                                        const SaliencyMethod& method, const EvalOptions& options);

/// Same, for maps computed beforehand (maps[i] belongs to image_ids[i]).
std::vector<EvalRecord> evaluate_maps(const Checkpoint& ckpt, const Dataset& data,
                                      std::span<const std::size_t> image_ids, const std::string& name,
                                      const std::vector<Tensor>& maps, const EvalOptions& options);

struct WilcoxonResult {
  std::size_t n = 0;  // non-zero differences
  double w = 0.0;
  double p = 1.0;
  bool exact = false;
};

/// Two-sided signed-rank test. Zero differences are dropped.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> differences);

enum class Metric { e_minus, e_plus, e_delta, de_minus, de_plus, de_delta };

std::string to_string(Metric metric);
Metric metric_from_string(const std::string& name);
double metric_value(const EvalRecord& record, Metric metric);

/// Linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

struct QuantileSummary {
  std::string group;
  Metric metric = Metric::de_minus;
  std::size_t n = 0;
  double q10 = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0, q90 = 0.0;
};

/// Quantiles of `metric` per method, skipping failed records.
std::vector<QuantileSummary> summarize(std::span<const EvalRecord> records, Metric metric);

struct MethodComparison {
  std::string method_a, method_b;
  Metric metric = Metric::de_minus;
  std::vector<std::size_t> image_ids;
  std::vector<double> differences;  // a - b
  std::size_t n = 0;
  double w = 0.0;
  double p = 1.0;
  double median_diff = 0.0;
  bool degenerate = false;    // all differences zero
  bool insufficient = false;  // fewer than five non-zero differences
};

/// Pairs records by image id and tests a - b.
MethodComparison compare_methods(std::span<const EvalRecord> a, std::span<const EvalRecord> b, Metric metric);

void write_records_csv(std::ostream& out, std::span<const EvalRecord> records);
void write_comparisons_csv(std::ostream& out, std::span<const MethodComparison> comparisons);
void write_summary_csv(std::ostream& out, std::span<const QuantileSummary> rows);

/// Shortest round-trip decimal form, used by every CSV writer.
std::string format_number(double v);

}  // namespace saliency
