#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "saliency/graph.hpp"
#include "saliency/network.hpp"
#include "saliency/ops.hpp"
#include "saliency/tensor.hpp"

using namespace saliency;

namespace {

Tensor t4(std::size_t h, std::size_t w, std::vector<double> v) { return Tensor({1, 1, h, w}, std::move(v)); }

// Gradient of sum(seed * op(x)) w.r.t. x through the graph.
Tensor graph_grad(const Tensor& x, const std::function<NodeId(Graph&, NodeId)>& build, const Tensor& seed) {
  Graph g;
  const NodeId in = g.leaf(x);
  g.track(in);
  const NodeId out = build(g, in);
  return g.backward(out, seed).at(in);
}

// Central-difference check of sum(seed * f(x)) at every coordinate of x.
void check_against_fd(const Tensor& x, const std::function<Tensor(const Tensor&)>& f, const Tensor& grad,
                      const Tensor& seed, double tol) {
  std::size_t smooth = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto fn = [&](double v) {
      Tensor xx = x;
      xx[i] = v;
      const Tensor y = f(xx);
      double s = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) s += seed[j] * y[j];
      return s;
    };
    const auto d = oracle::central_difference(fn, x[i], 1e-4);
    if (!d.smooth) continue;
    ++smooth;
    CHECK(oracle::relative_error(grad[i], d.central) < tol);
  }
  CHECK(smooth * 10 >= x.size() * 9);
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.sum() == doctest::Approx(9.0));
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("conv2d scalar kernel scales the input") {
  const Tensor y = ops::conv2d(t4(2, 2, {1, 2, 3, 4}), t4(1, 1, {2}), Tensor(), {1, 0});
  CHECK(y == t4(2, 2, {2, 4, 6, 8}));
}

TEST_CASE("conv2d full-window sum") {
  const Tensor y = ops::conv2d(t4(2, 2, {1, 2, 3, 4}), Tensor({1, 1, 2, 2}, 1.0), Tensor(), {1, 0});
  CHECK(y == t4(1, 1, {10}));
}

TEST_CASE("conv2d strided and padded matches nested loops") {
  std::mt19937_64 rng(11);
  const Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
  const Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({3}, rng);
  const Tensor y = ops::conv2d(x, k, b, {2, 1});
  const Tensor ref = oracle::conv2d_loops(x, k, &b, 2, 1);
  REQUIRE(y.shape() == ref.shape());
  CHECK(max_relative_difference(y, ref) < 1e-14);
}

TEST_CASE("conv2d rejects mismatched channels naming the dimension") {
  try {
    ops::conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor(), {1, 0});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("dim 1") != std::string::npos);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(12);
  const Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
  const Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({3}, rng);
  const ops::Conv2dGeometry geom{2, 1};
  const Tensor y = ops::conv2d(x, k, b, geom);
  const Tensor seed = oracle::random_tensor(y.shape(), rng);
  const auto g = ops::conv2d_backward(x, k, seed, geom, true, true, true);
  check_against_fd(x, [&](const Tensor& v) { return ops::conv2d(v, k, b, geom); }, g.input, seed, 1e-6);
  check_against_fd(k, [&](const Tensor& v) { return ops::conv2d(x, v, b, geom); }, g.kernel, seed, 1e-6);
  check_against_fd(b, [&](const Tensor& v) { return ops::conv2d(x, k, v, geom); }, g.bias, seed, 1e-6);
}

TEST_CASE("relu forward and backward") {
  CHECK(ops::relu(Tensor({3}, {-1, 0, 2})) == Tensor({3}, {0, 0, 2}));
  const Tensor neg({2, 2}, {-1, -2, -3, -0.5});
  CHECK(ops::relu(neg) == Tensor({2, 2}, 0.0));
  CHECK(ops::relu_backward(neg, Tensor({2, 2}, 1.0)) == Tensor({2, 2}, 0.0));

  std::mt19937_64 rng(13);
  Tensor x = oracle::random_tensor({1, 1, 4, 4}, rng);
  for (double& v : x.data())
    if (std::fabs(v) < 0.01) v = 0.5;
  const Tensor seed = oracle::random_tensor(x.shape(), rng);
  check_against_fd(x, [](const Tensor& v) { return ops::relu(v); }, ops::relu_backward(x, seed), seed, 1e-6);
}

TEST_CASE("maxpool forward, tie rule and oracle") {
  CHECK(ops::maxpool2d(t4(2, 2, {1, 2, 3, 4}), 2, 2) == t4(1, 1, {4}));

  const Tensor flat({1, 1, 4, 4}, 3.0);
  std::vector<std::size_t> argmax;
  CHECK(ops::maxpool2d(flat, 2, 2, &argmax) == Tensor({1, 1, 2, 2}, 3.0));
  const Tensor g = ops::maxpool2d_backward(flat.shape(), argmax, Tensor({1, 1, 2, 2}, 1.0));
  // First occurrence of every window is its top-left element.
  CHECK(g == t4(4, 4, {1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0}));

  std::mt19937_64 rng(14);
  const Tensor x = oracle::random_tensor({1, 1, 6, 6}, rng);
  CHECK(ops::maxpool2d(x, 2, 2) == oracle::maxpool_loops(x, 2, 2));
  CHECK_THROWS_AS(ops::maxpool2d(Tensor({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST_CASE("dense forward and gradient rows") {
  CHECK(ops::dense(Tensor({1, 2}, {3, 4}), Tensor({1, 2}, {1, 2}), Tensor()) == Tensor({1, 1}, {11}));
  const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor x({1, 3}, {0.3, -2, 5});
  CHECK(ops::dense(x, eye, Tensor({3}, 0.0)) == x);

  std::mt19937_64 rng(15);
  const Tensor w = oracle::random_tensor({4, 3}, rng);
  for (std::size_t c = 0; c < 4; ++c) {
    Tensor seed({1, 4}, 0.0);
    seed[c] = 1.0;
    const auto g = ops::dense_backward(x, w, seed, true, false, false);
    for (std::size_t k = 0; k < 3; ++k) CHECK(g.input[k] == w.at(c, k));
  }
  CHECK_THROWS_AS(ops::dense(Tensor({1, 2}), Tensor({1, 3}), Tensor()), ShapeError);
}

TEST_CASE("frozen batchnorm") {
  const Tensor one({1}, 1.0), zero({1}, 0.0);
  std::mt19937_64 rng(16);
  const Tensor x = oracle::random_tensor({1, 1, 2, 2}, rng);
  CHECK(ops::batchnorm_frozen(x, {one, zero, zero, one, 0.0}) == x);

  const Tensor gamma({1}, 2.0), beta({1}, 3.0), mean({1}, 1.0), var({1}, 4.0);
  const ops::BatchNormParams p{gamma, beta, mean, var, 0.0};
  CHECK(ops::batchnorm_frozen(Tensor({1, 1, 1, 1}, 5.0), p)[0] == doctest::Approx(7.0));
  CHECK(ops::batchnorm_effective_bias(p)[0] == doctest::Approx(2.0));
  const Tensor bad_var({1}, -1.0);
  CHECK_THROWS_AS(ops::batchnorm_frozen(x, {gamma, beta, mean, bad_var, 0.5}), std::invalid_argument);
}

TEST_CASE("backward through relu(2x)") {
  auto build = [](Graph& g, NodeId in) { return g.relu(g.scale(in, 2.0)); };
  CHECK(graph_grad(Tensor({1, 1}, 3.0), build, Tensor({1, 1}, 1.0))[0] == 2.0);
  CHECK(graph_grad(Tensor({1, 1}, -3.0), build, Tensor({1, 1}, 1.0))[0] == 0.0);

  Graph g;
  const NodeId in = g.leaf(Tensor({1, 2}, 1.0));
  CHECK_THROWS_AS(g.backward(in, 2), std::out_of_range);
}

TEST_CASE("every gradient of a random 3-layer conv net matches finite differences") {
  std::mt19937_64 rng(17);
  const NetworkSpec spec = vgg_mini_spec({2, 8, 8}, 3, {3, 4, 4}, true);
  const Checkpoint ckpt = oracle::random_checkpoint(spec, rng, true);
  const Tensor x = oracle::random_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
  auto taped = forward_taped(ckpt, x, true);
  const std::size_t c = 1;
  const GradientMap grads = taped.graph.backward(taped.logits, c);

  std::size_t checked = 0, kinks = 0;
  auto check_coords = [&](const Tensor& value, const Tensor& grad, const std::function<double(std::size_t, double)>& f) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      const auto d = oracle::central_difference([&](double v) { return f(i, v); }, value[i], 1e-4);
      if (!d.smooth) {
        ++kinks;
        continue;
      }
      ++checked;
      CHECK(oracle::relative_error(grad[i], d.central) < 1e-5);
    }
  };
  check_coords(x, grads.at(taped.input), [&](std::size_t i, double v) {
    Tensor xx = x;
    xx[i] = v;
    return forward_logits(ckpt, xx).at(0, c);
  });
  for (const auto& [name, node] : taped.param_nodes) {
    check_coords(ckpt.param(name), grads.at(node), [&](std::size_t i, double v) {
      Checkpoint k = ckpt;
      k.param(name)[i] = v;
      return forward_logits(k, x).at(0, c);
    });
  }
  CHECK(checked > 100);
  CHECK(kinks * 10 < checked);
}

TEST_CASE("resize_map") {
  const Tensor one = ops::resize_map(Tensor({1, 1}, 0.7), 4, 3, ops::ResizeMode::bilinear);
  CHECK(one == Tensor({4, 3}, 0.7));

  const Tensor col = ops::resize_map(Tensor({2, 1}, {0, 1}), 5, 1, ops::ResizeMode::bilinear);
  const std::vector<double> expect{0, 0.25, 0.5, 0.75, 1};
  for (std::size_t i = 0; i < 5; ++i) CHECK(col[i] == doctest::Approx(expect[i]).epsilon(1e-15));

  std::mt19937_64 rng(18);
  const Tensor m = oracle::random_tensor({4, 3}, rng);
  for (auto mode : {ops::ResizeMode::bilinear, ops::ResizeMode::linear}) {
    const Tensor up = ops::resize_map(m, 13, 9, mode);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 3; ++x) CHECK(up.at(4 * y, 4 * x) == m.at(y, x));
    CHECK(ops::resize_map(Tensor({4, 3}, -2.0), 13, 9, mode) == Tensor({13, 9}, -2.0));
  }
  CHECK_THROWS_AS(ops::resize_map(m, 2, 3, ops::ResizeMode::bilinear), std::invalid_argument);
}

TEST_CASE("linear resize is nearest along columns") {
  const Tensor m({2, 2}, {0, 1, 2, 3});
  const Tensor up = ops::resize_map(m, 3, 3, ops::ResizeMode::linear);
  // Rows interpolate (0 -> 2), the middle column snaps to the right source column.
  CHECK(up.at(1, 0) == doctest::Approx(1.0));
  CHECK(up.at(0, 1) == 1.0);
  CHECK(up.at(1, 1) == doctest::Approx(2.0));
}

TEST_CASE("bias-free compositions are positively homogeneous") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    const NetworkSpec spec = oracle::random_spec(rng, oracle::Family::vgg, false);
    const Checkpoint ckpt = oracle::random_checkpoint(spec, rng, false);
    const Tensor x = oracle::random_tensor({1, spec.input.channels, spec.input.height, spec.input.width}, rng, 0, 1);
    const Tensor y = forward_logits(ckpt, x);
    for (double alpha : {0.25, 4.0}) {
      // Powers of two keep every product exact.
      CHECK(forward_logits(ckpt, x * alpha) == y * alpha);
    }
  }
}
