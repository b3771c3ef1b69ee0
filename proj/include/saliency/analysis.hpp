#pragma once

#include <span>
#include <vector>

#include "saliency/dataset.hpp"
#include "saliency/network.hpp"

namespace saliency {

/// Sets every bias-role parameter to zero: conv/dense biases plus batchnorm
/// beta and running mean. gamma and var are left alone.
Checkpoint zero_bias(const Checkpoint& ckpt);

/// Multiplies every bias-role parameter by `factor`.
void scale_biases(Checkpoint& ckpt, double factor);

/// True when every bias-role parameter is exactly zero.
bool is_bias_free(const Checkpoint& ckpt);

struct SweepCell {
  double scale = 1.0;
  double shift = 0.0;
  double top1 = 0.0;
};

/// Top-1 accuracy on inputs transformed as scale * x + shift, for every pair.
std::vector<SweepCell> scale_shift_sweep(const Checkpoint& ckpt, const Dataset& data,
                                         std::span<const double> scales,
                                         std::span<const double> shifts);

struct RegressionFit {
  double alpha = 0.0;
  double beta = 0.0;
  double residual_norm = 0.0;
};

/// Least-squares fit of zero_bias_logits = alpha * vanilla_logits + beta.
RegressionFit fit_output_regression(std::span<const double> vanilla_logits,
                                    std::span<const double> zero_bias_logits);

/// Pearson correlation; 0 when either side has no variance.
double pearson_correlation(std::span<const double> a, std::span<const double> b);

}  // namespace saliency
