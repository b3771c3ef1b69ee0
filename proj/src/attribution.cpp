#include "saliency/attribution.hpp"

#include <cmath>
#include <stdexcept>

#include "saliency/training.hpp"

namespace saliency {

std::string to_string(AttributionKind kind) {
  switch (kind) {
    case AttributionKind::activity: return "activity";
    case AttributionKind::bias: return "bias";
    case AttributionKind::gradcam: return "gradcam";
  }
  return "unknown";
}

std::string PsiConfig::describe() const {
  std::string s = use_abs ? "abs" : "signed";
  if (use_rescale) s += "+rescale";
  s += resize == ops::ResizeMode::bilinear ? "+bilinear" : "+linear";
  if (granularity == Granularity::per_feature) s += "+per-feature";
  return s;
}

Tensor rescale(Tensor values) {
  const double lo = values.min(), hi = values.max();
  if (hi == lo) return Tensor(values.shape());
  const double span = hi - lo;
  for (double& v : values.data()) v = (v - lo) / span;
  return values;
}

namespace {

Tensor transform_plane(Tensor plane, const PsiConfig& config, std::size_t height, std::size_t width) {
  if (config.use_abs) plane = abs(std::move(plane));
  if (config.use_rescale) plane = rescale(std::move(plane));
  return ops::resize_map(plane, height, width, config.resize);
}

// Sample 0 of an activation as [features, H, W].
Tensor as_feature_grid(const Tensor& t) {
  if (t.rank() == 4) return t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
  if (t.rank() == 2) return t.reshaped({t.dim(1), 1, 1});
  throw ShapeError("unexpected activation shape " + shape_string(t.shape()));
}

Tensor channel_sum(const Tensor& features) {
  const std::size_t f = features.dim(0), h = features.dim(1), w = features.dim(2);
  Tensor out({h, w});
  for (std::size_t k = 0; k < f; ++k)
    for (std::size_t i = 0; i < h * w; ++i) out[i] += features[k * h * w + i];
  return out;
}

Tensor product(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

}  // namespace

SaliencyMap psi(const AttributionMap& map, const PsiConfig& config, std::size_t height, std::size_t width) {
  if (!config.use_abs && !config.use_rescale) {
    throw std::invalid_argument("psi needs abs or rescale to produce a non-negative map");
  }
  SaliencyMap out;
  out.provenance = to_string(map.kind) + ":" + std::to_string(map.layer) + "/" + config.describe();
  if (config.granularity == Granularity::per_layer) {
    out.values = transform_plane(map.values, config, height, width);
    return out;
  }
  if (!config.use_rescale) throw std::invalid_argument("per-feature psi requires rescale");
  if (map.features.empty()) throw std::invalid_argument("per-feature psi needs per-feature contributions");
  const std::size_t f = map.features.dim(0), h = map.features.dim(1), w = map.features.dim(2);
  out.values = Tensor({height, width});
  for (std::size_t k = 0; k < f; ++k) {
    const auto d = map.features.data().subspan(k * h * w, h * w);
    out.values += transform_plane(Tensor({h, w}, std::vector<double>(d.begin(), d.end())), config, height, width);
  }
  return out;
}

Explanation::Explanation(const Checkpoint& ckpt, const Tensor& x, std::optional<std::size_t> class_index)
    : ckpt_(&ckpt), input_(ckpt.spec.input), taped_(forward_taped(ckpt, x, false)) {
  const Tensor& logits = taped_.graph.value(taped_.logits);
  if (logits.dim(0) != 1) throw ShapeError("explanations take a single image, got batch " + shape_string(logits.shape()));
  class_index_ = class_index ? *class_index : argmax_row(logits);
  grads_ = taped_.graph.backward(taped_.logits, class_index_);
}

double Explanation::logit() const { return logits().at(0, class_index_); }
const Tensor& Explanation::logits() const { return taped_.graph.value(taped_.logits); }

const Tensor& Explanation::gradient_of(NodeId node) const { return grads_.at(node); }

const Tensor& Explanation::input() const { return taped_.graph.value(taped_.input); }
const Tensor& Explanation::input_gradient() const { return gradient_of(taped_.input); }

void Explanation::check_layer(std::size_t layer, std::size_t min_layer) const {
  if (layer < min_layer || layer > depth()) {
    throw std::out_of_range("layer " + std::to_string(layer) + " outside [" + std::to_string(min_layer) +
                            ", " + std::to_string(depth()) + "]");
  }
}

const Tensor& Explanation::activity_value(std::size_t layer) const {
  check_layer(layer, 0);
  return layer == 0 ? input() : taped_.graph.value(taped_.activities[layer - 1]);
}

const Tensor& Explanation::activity_gradient(std::size_t layer) const {
  check_layer(layer, 0);
  return layer == 0 ? input_gradient() : gradient_of(taped_.activities[layer - 1]);
}

std::pair<std::size_t, std::size_t> Explanation::grid(std::size_t layer) const {
  const Tensor f = as_feature_grid(activity_value(layer));
  return {f.dim(1), f.dim(2)};
}

SaliencyMap Explanation::gradient_saliency() const {
  SaliencyMap out;
  out.values = channel_sum(abs(as_feature_grid(input_gradient())));
  out.provenance = "gradient";
  return out;
}

AttributionMap Explanation::gradient_times_input() const { return activity(0); }

AttributionMap Explanation::activity(std::size_t layer) const {
  check_layer(layer, 0);
  AttributionMap map;
  map.class_index = class_index_;
  map.layer = layer;
  map.kind = AttributionKind::activity;
  map.features = product(as_feature_grid(activity_value(layer)), as_feature_grid(activity_gradient(layer)));
  map.values = channel_sum(map.features);
  return map;
}

AttributionMap Explanation::bias(std::size_t layer) const {
  check_layer(layer, 1);
  const auto [h, w] = grid(layer);
  AttributionMap map;
  map.class_index = class_index_;
  map.layer = layer;
  map.kind = AttributionKind::bias;
  std::vector<double> features;
  std::size_t count = 0;
  for (const BiasSite& site : taped_.bias_sites) {
    if (site.stage != layer) continue;
    const Tensor g = as_feature_grid(gradient_of(site.node));
    if (g.dim(1) != h || g.dim(2) != w) {
      throw ShapeError("bias site grid " + shape_string(g.shape()) + " differs from layer " +
                       std::to_string(layer) + " grid " + shape_string({h, w}));
    }
    for (std::size_t k = 0; k < g.dim(0); ++k) {
      for (std::size_t i = 0; i < h * w; ++i) features.push_back(site.bias[k] * g[k * h * w + i]);
    }
    count += g.dim(0);
  }
  if (count == 0) {
    map.no_bias = true;
    map.features = Tensor({1, h, w});
  } else {
    map.features = Tensor({count, h, w}, std::move(features));
  }
  map.values = channel_sum(map.features);
  return map;
}

double Explanation::bias_parameter_sum(std::size_t layer) const {
  check_layer(layer, 1);
  double total = 0.0;
  for (const BiasSite& site : taped_.bias_sites) {
    if (site.stage != layer) continue;
    const Tensor g = as_feature_grid(gradient_of(site.node));
    const std::size_t plane = g.dim(1) * g.dim(2);
    for (std::size_t k = 0; k < g.dim(0); ++k) {
      double grad_total = 0.0;
      for (std::size_t i = 0; i < plane; ++i) grad_total += g[k * plane + i];
      total += site.bias[k] * grad_total;
    }
  }
  return total;
}

AttributionMap Explanation::gradcam(std::size_t layer, bool rectify) const {
  check_layer(layer, 0);
  if (activity_value(layer).rank() != 4) {
    throw std::invalid_argument("gradcam needs a spatial layer; layer " + std::to_string(layer) + " is dense");
  }
  const Tensor h = as_feature_grid(activity_value(layer));
  const Tensor g = as_feature_grid(activity_gradient(layer));
  const std::size_t f = h.dim(0), plane = h.dim(1) * h.dim(2);
  AttributionMap map;
  map.class_index = class_index_;
  map.layer = layer;
  map.kind = AttributionKind::gradcam;
  map.features = Tensor(h.shape());
  for (std::size_t k = 0; k < f; ++k) {
    double pooled = 0.0;
    for (std::size_t i = 0; i < plane; ++i) pooled += g[k * plane + i];
    pooled /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) map.features[k * plane + i] = h[k * plane + i] * pooled;
  }
  map.values = channel_sum(map.features);
  if (rectify) {
    for (double& v : map.values.data()) v = std::max(v, 0.0);
  }
  return map;
}

DecompositionReport Explanation::decomposition() const {
  DecompositionReport r;
  r.class_index = class_index_;
  r.logit = logit();
  const std::size_t depth_l = depth();
  r.activity_sums.resize(depth_l + 1);
  r.bias_sums.assign(depth_l + 1, 0.0);
  r.bias_parameter_sums.assign(depth_l + 1, 0.0);
  for (std::size_t l = 0; l <= depth_l; ++l) {
    r.activity_sums[l] = activity(l).values.sum();
    if (l > 0) {
      r.bias_sums[l] = bias(l).values.sum();
      r.bias_parameter_sums[l] = bias_parameter_sum(l);
    }
  }
  r.residuals.resize(depth_l + 1);
  for (std::size_t l = 0; l <= depth_l; ++l) {
    double total = r.activity_sums[l];
    for (std::size_t above = l + 1; above <= depth_l; ++above) total += r.bias_sums[above];
    r.residuals[l] = std::fabs(r.logit - total);
  }
  return r;
}

SaliencyMap Explanation::fullgrad(Granularity granularity) const {
  PsiConfig config = PsiConfig::aggregation();
  config.granularity = granularity;
  PsiConfig input_config = PsiConfig::aggregation();
  SaliencyMap out = psi(gradient_times_input(), input_config, height(), width());
  for (std::size_t l = 1; l <= depth(); ++l) out.values += psi(bias(l), config, height(), width()).values;
  bool any_bias = false;
  for (const BiasSite& site : taped_.bias_sites) {
    for (double v : site.bias.data()) any_bias = any_bias || v != 0.0;
  }
  out.provenance = granularity == Granularity::per_feature ? "fullgrad:per-feature" : "fullgrad:per-layer";
  if (!any_bias) out.warnings.push_back("network has no non-zero bias terms; fullgrad reduces to psi(gradient x input)");
  return out;
}

SaliencyMap Explanation::aggregate_activity(std::size_t first_layer, const PsiConfig& config) const {
  check_layer(first_layer, 0);
  SaliencyMap out;
  out.values = Tensor({height(), width()});
  for (std::size_t l = first_layer; l <= depth(); ++l) {
    out.values += psi(activity(l), config, height(), width()).values;
  }
  out.provenance = "agg:" + std::to_string(first_layer) + "/" + config.describe();
  return out;
}

SaliencyMap gradient_saliency(const Checkpoint& ckpt, const Tensor& x, std::size_t c) {
  return Explanation(ckpt, x, c).gradient_saliency();
}

AttributionMap gradient_times_input(const Checkpoint& ckpt, const Tensor& x, std::size_t c) {
  return Explanation(ckpt, x, c).gradient_times_input();
}

AttributionMap activity_attribution(const Checkpoint& ckpt, const Tensor& x, std::size_t c, std::size_t layer) {
  return Explanation(ckpt, x, c).activity(layer);
}

AttributionMap bias_attribution(const Checkpoint& ckpt, const Tensor& x, std::size_t c, std::size_t layer) {
  return Explanation(ckpt, x, c).bias(layer);
}

AttributionMap gradcam_attribution(const Checkpoint& ckpt, const Tensor& x, std::size_t c, std::size_t layer,
                                   bool rectify) {
  return Explanation(ckpt, x, c).gradcam(layer, rectify);
}

DecompositionReport decomposition_report(const Checkpoint& ckpt, const Tensor& x, std::size_t c) {
  return Explanation(ckpt, x, c).decomposition();
}

SaliencyMap fullgrad_saliency(const Checkpoint& ckpt, const Tensor& x, std::size_t c, Granularity granularity) {
  return Explanation(ckpt, x, c).fullgrad(granularity);
}

SaliencyMap aggregate_activity_saliency(const Checkpoint& ckpt, const Tensor& x, std::size_t c,
                                        std::size_t first_layer, const PsiConfig& config) {
  return Explanation(ckpt, x, c).aggregate_activity(first_layer, config);
}

}  // namespace saliency
