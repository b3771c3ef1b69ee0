#include "saliency/analysis.hpp"

#include <cmath>
#include <stdexcept>

#include "saliency/training.hpp"

namespace saliency {

Checkpoint zero_bias(const Checkpoint& ckpt) {
  Checkpoint out = ckpt;
  scale_biases(out, 0.0);
  return out;
}

void scale_biases(Checkpoint& ckpt, double factor) {
  for (const std::string& name : bias_parameter_names(ckpt)) {
    for (double& v : ckpt.param(name).data()) v = factor == 0.0 ? 0.0 : v * factor;
  }
}

bool is_bias_free(const Checkpoint& ckpt) {
  for (const std::string& name : bias_parameter_names(ckpt)) {
    for (double v : ckpt.param(name).data()) {
      if (v != 0.0) return false;
    }
  }
  return true;
}

std::vector<SweepCell> scale_shift_sweep(const Checkpoint& ckpt, const Dataset& data,
                                         std::span<const double> scales,
                                         std::span<const double> shifts) {
  std::vector<SweepCell> table;
  for (double scale : scales) {
    if (!(scale > 0.0)) throw std::invalid_argument("sweep scales must be positive");
    for (double shift : shifts) {
      Dataset moved = data;
      if (scale != 1.0 || shift != 0.0) {
        for (double& v : moved.images.data()) v = scale * v + shift;
      }
      table.push_back({scale, shift, topk_accuracy(dataset_logits(ckpt, moved), moved.labels, 1)});
    }
  }
  return table;
}

RegressionFit fit_output_regression(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) {
    throw std::invalid_argument("regression needs equal-length, non-empty logit vectors");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("vanilla logits have zero variance");
  RegressionFit fit;
  fit.alpha = sxy / sxx;
  fit.beta = my - fit.alpha * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (fit.alpha * x[i] + fit.beta);
    rss += r * r;
  }
  fit.residual_norm = std::sqrt(rss);
  return fit;
}

double pearson_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("correlation needs equal-length inputs");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace saliency
