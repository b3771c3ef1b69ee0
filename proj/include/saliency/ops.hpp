#pragma once

#include <cstddef>
#include <vector>

#include "saliency/tensor.hpp"

// Forward and backward kernels for the layer types used by the networks.
// Activations are NCHW; dense layers take [N, K] and produce [N, C].
namespace saliency::ops {

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation. `bias` may be absent (default-constructed Tensor).
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Conv2dGeometry geom);

struct Conv2dGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

/// Each requested gradient is filled; the rest stay absent.
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out,
                            Conv2dGeometry geom, bool want_input, bool want_kernel,
                            bool want_bias);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

/// Max pooling. `argmax` receives, for every output element, the flat index of
/// the selected input element (first occurrence in row-major order on ties).
Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride,
                 std::vector<std::size_t>* argmax = nullptr);
Tensor maxpool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                          const Tensor& grad_out);

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};
DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                          bool want_input, bool want_weights, bool want_bias);

struct BatchNormParams {
  const Tensor& gamma;
  const Tensor& beta;
  const Tensor& mean;
  const Tensor& var;
  double epsilon;
};

/// gamma * (x - mean) / sqrt(var + eps) + beta with constant statistics.
Tensor batchnorm_frozen(const Tensor& input, const BatchNormParams& p);

/// Per-channel beta - gamma * mean / sqrt(var + eps).
Tensor batchnorm_effective_bias(const BatchNormParams& p);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
  Tensor mean;
  Tensor var;
};
BatchNormGrads batchnorm_frozen_backward(const Tensor& input, const BatchNormParams& p,
                                         const Tensor& grad_out);

/// Softmax over the last axis of a [N, C] tensor.
Tensor softmax(const Tensor& logits, double temperature = 1.0);

enum class ResizeMode { bilinear, linear };

/// Corner-aligned upsampling of an [H, W] map.
///
/// bilinear interpolates along both axes. linear interpolates along axis 0
/// and takes the nearest source column along axis 1.
Tensor resize_map(const Tensor& map, std::size_t height, std::size_t width, ResizeMode mode);

}  // namespace saliency::ops
