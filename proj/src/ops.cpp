#include "saliency/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace saliency::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

std::size_t conv_extent(std::size_t in, std::size_t k, Conv2dGeometry g, const char* axis) {
  const std::size_t padded = in + 2 * g.padding;
  if (g.stride == 0) throw ShapeError("conv2d stride must be positive");
  if (padded < k) {
    throw ShapeError(std::string("conv2d kernel ") + axis + " extent " + std::to_string(k) +
                     " exceeds padded input " + axis + " extent " + std::to_string(padded));
  }
  return (padded - k) / g.stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Conv2dGeometry geom) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d input channels (dim 1) " + std::to_string(cin) +
                     " != kernel input channels (dim 1) " + std::to_string(kernel.dim(1)));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d bias length " + shape_string(bias.shape()) +
                     " != output channels (kernel dim 0) " + std::to_string(cout));
  }
  const std::size_t oh = conv_extent(h, kh, geom, "height");
  const std::size_t ow = conv_extent(w, kw, geom, "width");
  Tensor out({n, cout, oh, ow});
  const auto in = input.data();
  const auto ker = kernel.data();
  auto o = out.data();
  const long pad = static_cast<long>(geom.padding);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < cout; ++oc) {
      double* plane = &o[((b * cout + oc) * oh) * ow];
      if (!bias.empty()) std::fill(plane, plane + oh * ow, bias[oc]);
      for (std::size_t ic = 0; ic < cin; ++ic) {
        const double* src = &in[((b * cin + ic) * h) * w];
        const double* kp = &ker[((oc * cin + ic) * kh) * kw];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double kv = kp[ky * kw + kx];
            for (std::size_t y = 0; y < oh; ++y) {
              const long iy = static_cast<long>(y * geom.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              const double* row = src + iy * static_cast<long>(w);
              double* orow = plane + y * ow;
              for (std::size_t x = 0; x < ow; ++x) {
                const long ix = static_cast<long>(x * geom.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                orow[x] += kv * row[ix];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out,
                            Conv2dGeometry geom, bool want_input, bool want_kernel,
                            bool want_bias) {
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  Conv2dGrads grads;
  if (want_input) grads.input = Tensor(input.shape());
  if (want_kernel) grads.kernel = Tensor(kernel.shape());
  if (want_bias) grads.bias = Tensor({cout});
  const auto in = input.data();
  const auto ker = kernel.data();
  const auto go = grad_out.data();
  const long pad = static_cast<long>(geom.padding);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const double* gplane = &go[((b * cout + oc) * oh) * ow];
      if (want_bias) {
        double acc = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) acc += gplane[i];
        grads.bias[oc] += acc;
      }
      if (!want_input && !want_kernel) continue;
      for (std::size_t ic = 0; ic < cin; ++ic) {
        const double* src = &in[((b * cin + ic) * h) * w];
        const double* kp = &ker[((oc * cin + ic) * kh) * kw];
        double* gin = want_input ? &grads.input.data()[((b * cin + ic) * h) * w] : nullptr;
        double* gk = want_kernel ? &grads.kernel.data()[((oc * cin + ic) * kh) * kw] : nullptr;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double kv = kp[ky * kw + kx];
            double kacc = 0.0;
            for (std::size_t y = 0; y < oh; ++y) {
              const long iy = static_cast<long>(y * geom.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              const double* grow = gplane + y * ow;
              for (std::size_t x = 0; x < ow; ++x) {
                const long ix = static_cast<long>(x * geom.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                if (gin) gin[idx] += kv * grow[x];
                kacc += src[idx] * grow[x];
              }
            }
            if (gk) gk[ky * kw + kx] += kacc;
          }
        }
      }
    }
  }
  return grads;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  Tensor g = grad_out;
  const auto in = input.data();
  auto gd = g.data();
  for (std::size_t i = 0; i < gd.size(); ++i) {
    if (!(in[i] > 0.0)) gd[i] = 0.0;
  }
  return g;
}

Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride,
                 std::vector<std::size_t>* argmax) {
  require_rank(input, 4, "maxpool2d input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d window and stride must be positive");
  if (window > h || window > w) {
    throw ShapeError("maxpool2d window " + std::to_string(window) + " larger than input " +
                     (window > h ? "height (dim 2) " + std::to_string(h)
                                 : "width (dim 3) " + std::to_string(w)));
  }
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  Tensor out({n, c, oh, ow});
  if (argmax) argmax->assign(out.size(), 0);
  const auto in = input.data();
  auto o = out.data();
  std::size_t oi = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++oi) {
        std::size_t best = base + (y * stride) * w + x * stride;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = base + (y * stride + dy) * w + x * stride + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        o[oi] = in[best];
        if (argmax) (*argmax)[oi] = best;
      }
    }
  }
  return out;
}

Tensor maxpool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                          const Tensor& grad_out) {
  Tensor g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weights, 2, "dense weights");
  const std::size_t n = input.dim(0), k = input.dim(1), c = weights.dim(0);
  if (weights.dim(1) != k) {
    throw ShapeError("dense input features (dim 1) " + std::to_string(k) +
                     " != weight columns (dim 1) " + std::to_string(weights.dim(1)));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != c)) {
    throw ShapeError("dense bias length " + shape_string(bias.shape()) +
                     " != weight rows (dim 0) " + std::to_string(c));
  }
  Tensor out({n, c});
  const auto in = input.data();
  const auto wt = weights.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t r = 0; r < c; ++r) {
      double acc = bias.empty() ? 0.0 : bias[r];
      const double* wr = &wt[r * k];
      const double* xr = &in[b * k];
      for (std::size_t j = 0; j < k; ++j) acc += wr[j] * xr[j];
      out.at(b, r) = acc;
    }
  }
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                          bool want_input, bool want_weights, bool want_bias) {
  const std::size_t n = input.dim(0), k = input.dim(1), c = weights.dim(0);
  DenseGrads grads;
  if (want_input) grads.input = Tensor(input.shape());
  if (want_weights) grads.weights = Tensor(weights.shape());
  if (want_bias) grads.bias = Tensor({c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t r = 0; r < c; ++r) {
      const double g = grad_out.at(b, r);
      if (g == 0.0) continue;
      if (want_bias) grads.bias[r] += g;
      for (std::size_t j = 0; j < k; ++j) {
        if (want_input) grads.input.at(b, j) += g * weights.at(r, j);
        if (want_weights) grads.weights.at(r, j) += g * input.at(b, j);
      }
    }
  }
  return grads;
}

namespace {

void check_bn(const Tensor& input, const BatchNormParams& p) {
  if (input.rank() < 2) throw ShapeError("batchnorm input needs a channel axis (dim 1)");
  const std::size_t c = input.dim(1);
  for (const Tensor* t : {&p.gamma, &p.beta, &p.mean, &p.var}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw ShapeError("batchnorm parameter shape " + shape_string(t->shape()) +
                       " != input channels (dim 1) " + std::to_string(c));
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (!(p.var[i] + p.epsilon > 0.0)) {
      throw std::invalid_argument("batchnorm var + epsilon must be positive (channel " +
                                  std::to_string(i) + ")");
    }
  }
}

std::size_t inner_size(const Tensor& t) {
  std::size_t s = 1;
  for (std::size_t a = 2; a < t.rank(); ++a) s *= t.dim(a);
  return s;
}

}  // namespace

Tensor batchnorm_frozen(const Tensor& input, const BatchNormParams& p) {
  check_bn(input, p);
  const std::size_t n = input.dim(0), c = input.dim(1), inner = inner_size(input);
  Tensor out(input.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double scale = p.gamma[ch] / std::sqrt(p.var[ch] + p.epsilon);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        out[base + i] = scale * (input[base + i] - p.mean[ch]) + p.beta[ch];
      }
    }
  }
  return out;
}

Tensor batchnorm_effective_bias(const BatchNormParams& p) {
  const std::size_t c = p.gamma.size();
  Tensor b({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(p.var[ch] + p.epsilon > 0.0)) {
      throw std::invalid_argument("batchnorm var + epsilon must be positive (channel " +
                                  std::to_string(ch) + ")");
    }
    b[ch] = p.beta[ch] - p.gamma[ch] * p.mean[ch] / std::sqrt(p.var[ch] + p.epsilon);
  }
  return b;
}

BatchNormGrads batchnorm_frozen_backward(const Tensor& input, const BatchNormParams& p,
                                         const Tensor& grad_out) {
  const std::size_t n = input.dim(0), c = input.dim(1), inner = inner_size(input);
  BatchNormGrads g{Tensor(input.shape()), Tensor({c}), Tensor({c}), Tensor({c}), Tensor({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double denom = std::sqrt(p.var[ch] + p.epsilon);
    const double scale = p.gamma[ch] / denom;
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double go = grad_out[base + i];
        g.input[base + i] = scale * go;
        sum_g += go;
        sum_gx += go * (input[base + i] - p.mean[ch]);
      }
    }
    g.gamma[ch] = sum_gx / denom;
    g.beta[ch] = sum_g;
    g.mean[ch] = -scale * sum_g;
    g.var[ch] = -0.5 * p.gamma[ch] * sum_gx / (denom * denom * denom);
  }
  return g;
}

Tensor softmax(const Tensor& logits, double temperature) {
  require_rank(logits, 2, "softmax input");
  Tensor out(logits.shape());
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (std::size_t b = 0; b < n; ++b) {
    double top = logits.at(b, 0) / temperature;
    for (std::size_t j = 1; j < c; ++j) top = std::max(top, logits.at(b, j) / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out.at(b, j) = std::exp(logits.at(b, j) / temperature - top);
      z += out.at(b, j);
    }
    for (std::size_t j = 0; j < c; ++j) out.at(b, j) /= z;
  }
  return out;
}

namespace {

// Corner-aligned source coordinate of target index i.
double source_coord(std::size_t i, std::size_t src, std::size_t dst) {
  if (dst == 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
}

}  // namespace

Tensor resize_map(const Tensor& map, std::size_t height, std::size_t width, ResizeMode mode) {
  require_rank(map, 2, "resize_map input");
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (height < h || width < w) {
    throw std::invalid_argument("resize_map only upsamples: " + shape_string(map.shape()) +
                                " -> " + shape_string({height, width}));
  }
  Tensor out({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = source_coord(y, h, height);
    const std::size_t y0 = std::min(static_cast<std::size_t>(std::floor(sy)), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = source_coord(x, w, width);
      double top, bottom;
      if (mode == ResizeMode::bilinear) {
        const std::size_t x0 = std::min(static_cast<std::size_t>(std::floor(sx)), w - 1);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - static_cast<double>(x0);
        top = map.at(y0, x0) * (1.0 - fx) + map.at(y0, x1) * fx;
        bottom = map.at(y1, x0) * (1.0 - fx) + map.at(y1, x1) * fx;
      } else {
        const std::size_t xn = std::min(static_cast<std::size_t>(std::floor(sx + 0.5)), w - 1);
        top = map.at(y0, xn);
        bottom = map.at(y1, xn);
      }
      out.at(y, x) = fy == 0.0 ? top : top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

}  // namespace saliency::ops
