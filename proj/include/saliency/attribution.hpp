#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "saliency/network.hpp"
#include "saliency/ops.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

enum class AttributionKind { activity, bias, gradcam };

std::string to_string(AttributionKind kind);

/// Signed, channel-summed attribution over the spatial grid of one layer.
struct AttributionMap {
  std::size_t class_index = 0;
  std::size_t layer = 0;  // 0 = input
  AttributionKind kind = AttributionKind::activity;
  Tensor values;    // [H, W]
  Tensor features;  // [features, H, W] contributions before channel summation
  /// Set for bias maps of layers without bias-role parameters.
  bool no_bias = false;
};

/// Non-negative, input-sized map.
struct SaliencyMap {
  Tensor values;  // [H, W]
  std::string provenance;
  std::vector<std::string> warnings;
};

enum class Granularity { per_layer, per_feature };

/// abs -> rescale -> resize pipeline turning attributions into saliency.
struct PsiConfig {
  bool use_abs = true;
  bool use_rescale = true;
  ops::ResizeMode resize = ops::ResizeMode::bilinear;
  Granularity granularity = Granularity::per_layer;

  /// abs + min-max rescale + bilinear: the layer-aggregation pipeline.
  static PsiConfig aggregation() { return {}; }
  /// abs + bilinear without rescale: single-layer comparisons.
  static PsiConfig single_layer() { return {true, false, ops::ResizeMode::bilinear, Granularity::per_layer}; }

  std::string describe() const;
};

/// (a - min a) / (max a - min a); all zeros when max == min.
Tensor rescale(Tensor values);

/// Transforms one attribution map into an input-sized saliency contribution.
/// Per-feature granularity rescales every feature map before summing and
/// requires use_rescale.
SaliencyMap psi(const AttributionMap& map, const PsiConfig& config, std::size_t height,
                std::size_t width);

/// Gross sums and reconstruction residuals of all L+1 decompositions.
struct DecompositionReport {
  std::size_t class_index = 0;
  double logit = 0.0;
  std::vector<double> activity_sums;        // A^{h,l}, l = 0..L
  std::vector<double> bias_sums;            // A^{b,l} from the spatial maps; entry 0 is 0
  std::vector<double> bias_parameter_sums;  // same totals, one term per parameter
  std::vector<double> residuals;            // |f_c - (A^{h,l} + sum_{l'>l} A^{b,l'})|
};

/// One forward and one backward pass for (x, c), from which every attribution
/// of the image is read off.
class Explanation {
 public:
  /// `class_index` defaults to the predicted class.
  Explanation(const Checkpoint& ckpt, const Tensor& x,
              std::optional<std::size_t> class_index = std::nullopt);

  std::size_t class_index() const { return class_index_; }
  double logit() const;
  const Tensor& logits() const;
  /// Depth L (number of attribution stages).
  std::size_t depth() const { return taped_.activities.size(); }
  std::size_t height() const { return input_.height; }
  std::size_t width() const { return input_.width; }
  /// Spatial extent of layer l's grid.
  std::pair<std::size_t, std::size_t> grid(std::size_t layer) const;

  const Tensor& input() const;
  const Tensor& input_gradient() const;
  /// dlogit / dh^l as [1, features, H, W] (or [1, units] for dense stages).
  const Tensor& activity_gradient(std::size_t layer) const;
  const Tensor& activity_value(std::size_t layer) const;

  SaliencyMap gradient_saliency() const;
  AttributionMap gradient_times_input() const;
  /// 0 <= layer <= L; layer 0 is gradient x input.
  AttributionMap activity(std::size_t layer) const;
  /// 1 <= layer <= L.
  AttributionMap bias(std::size_t layer) const;
  /// sum over bias parameters of value times total gradient for the layer.
  double bias_parameter_sum(std::size_t layer) const;
  /// Activity times per-feature spatially averaged gradient. Spatial layers only.
  AttributionMap gradcam(std::size_t layer, bool rectify = false) const;

  DecompositionReport decomposition() const;

  SaliencyMap fullgrad(Granularity granularity) const;
  SaliencyMap aggregate_activity(std::size_t first_layer,
                                 const PsiConfig& config = PsiConfig::aggregation()) const;

 private:
  void check_layer(std::size_t layer, std::size_t min_layer) const;
  const Tensor& gradient_of(NodeId node) const;

  const Checkpoint* ckpt_;
  ActivationShape input_;
  TapedForward taped_;
  GradientMap grads_;
  std::size_t class_index_ = 0;
};

// Free-function forms of the attribution operations.
SaliencyMap gradient_saliency(const Checkpoint& ckpt, const Tensor& x, std::size_t c);
AttributionMap gradient_times_input(const Checkpoint& ckpt, const Tensor& x, std::size_t c);
AttributionMap activity_attribution(const Checkpoint& ckpt, const Tensor& x, std::size_t c, std::size_t layer);
AttributionMap bias_attribution(const Checkpoint& ckpt, const Tensor& x, std::size_t c, std::size_t layer);
AttributionMap gradcam_attribution(const Checkpoint& ckpt, const Tensor& x, std::size_t c, std::size_t layer,
                                   bool rectify = false);
DecompositionReport decomposition_report(const Checkpoint& ckpt, const Tensor& x, std::size_t c);
SaliencyMap fullgrad_saliency(const Checkpoint& ckpt, const Tensor& x, std::size_t c, Granularity granularity);
SaliencyMap aggregate_activity_saliency(const Checkpoint& ckpt, const Tensor& x, std::size_t c,
                                        std::size_t first_layer,
                                        const PsiConfig& config = PsiConfig::aggregation());

}  // namespace saliency
