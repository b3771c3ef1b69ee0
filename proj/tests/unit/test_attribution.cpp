#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "saliency/analysis.hpp"
#include "saliency/attribution.hpp"
#include "saliency/heatmap.hpp"
#include "saliency/network.hpp"

using namespace saliency;
namespace fs = std::filesystem;

namespace {

const fs::path fixtures = TEST_FIXTURES_DIR;

Tensor random_input(const NetworkSpec& spec, std::mt19937_64& rng) {
  return oracle::random_tensor({1, spec.input.channels, spec.input.height, spec.input.width}, rng, 0.0, 1.0);
}

double tol(double f) { return 1e-6 * std::max(1.0, std::fabs(f)); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("gradient saliency") {
  std::mt19937_64 rng(31);
  const NetworkSpec lin = linear_classifier_spec({2, 3, 3}, 4, false);
  const Checkpoint ck = oracle::random_checkpoint(lin, rng, false);
  const Tensor& w = ck.param("layer1.weight");
  const SaliencyMap a = gradient_saliency(ck, random_input(lin, rng), 2);
  const SaliencyMap b = gradient_saliency(ck, random_input(lin, rng), 2);
  CHECK(a.values == b.values);
  for (std::size_t p = 0; p < 9; ++p) {
    CHECK(a.values[p] == doctest::Approx(std::fabs(w.at(2, p)) + std::fabs(w.at(2, 9 + p))));
  }

  const NetworkSpec spec = vgg_mini_spec({2, 8, 8}, 3, {3, 4}, false);
  const Checkpoint net = oracle::random_checkpoint(spec, rng, false);
  const Tensor x = random_input(spec, rng);
  CHECK(gradient_saliency(net, x * 2.0, 0).values == gradient_saliency(net, x, 0).values);

  // Channel-summed |df/dx| against central differences; pixels whose
  // difference straddles a kink are left out.
  const SaliencyMap g = gradient_saliency(net, x, 1);
  Tensor fd({8, 8});
  std::vector<bool> usable(64, true);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto d = oracle::central_difference(
        [&](double v) {
          Tensor xx = x;
          xx[i] = v;
          return forward_logits(net, xx).at(0, 1);
        },
        x[i], 1e-4);
    if (!d.smooth) usable[i % 64] = false;
    fd[i % 64] += std::fabs(d.central);
  }
  std::size_t compared = 0;
  for (std::size_t p = 0; p < 64; ++p) {
    if (!usable[p]) continue;
    ++compared;
    CHECK(oracle::relative_error(g.values[p], fd[p]) < 1e-5);
  }
  CHECK(compared >= 56);
}

TEST_CASE("gradient x input") {
  std::mt19937_64 rng(32);
  const NetworkSpec lin = linear_classifier_spec({2, 3, 3}, 4, false);
  const Checkpoint ck = oracle::random_checkpoint(lin, rng, false);
  const Tensor x = random_input(lin, rng);
  const AttributionMap a = gradient_times_input(ck, x, 1);
  CHECK(a.values.shape() == Shape{3, 3});
  CHECK(std::fabs(a.values.sum() - forward_logits(ck, x).at(0, 1)) <= 1e-12);
  CHECK(gradient_times_input(ck, Tensor(x.shape(), 0.0), 1).values == Tensor({3, 3}, 0.0));

  const NetworkSpec mlp = mlp_spec(6, {5}, 3, false);
  for (int t = 0; t < 10; ++t) {
    const Checkpoint net = oracle::random_checkpoint(mlp, rng, false);
    const Tensor xm = oracle::random_tensor({1, 6, 1, 1}, rng);
    const double f = forward_logits(net, xm).at(0, 0);
    CHECK(std::fabs(gradient_times_input(net, xm, 0).values.sum() - f) <= tol(f));
  }
}

TEST_CASE("activity attribution") {
  std::mt19937_64 rng(33);
  const NetworkSpec spec = vgg_mini_spec({1, 8, 8}, 3, {3, 4}, false);
  const Checkpoint net = oracle::random_checkpoint(spec, rng, false);
  const Tensor x = random_input(spec, rng);
  const Explanation e(net, x, 2);
  REQUIRE(e.depth() == 3);
  CHECK(e.activity(3).values.sum() == doctest::Approx(e.logit()).epsilon(1e-12));
  for (std::size_t l = 0; l <= 3; ++l) CHECK(std::fabs(e.activity(l).values.sum() - e.logit()) <= tol(e.logit()));
  CHECK(e.activity(1).values.shape() == Shape{8, 8});
  CHECK(e.activity(2).values.shape() == Shape{4, 4});
  CHECK(e.activity(0).values == e.gradient_times_input().values);
  CHECK_THROWS_AS(e.activity(4), std::out_of_range);

  // A layer that never fires contributes nothing.
  Checkpoint dead = net;
  for (double& v : dead.param("layer0.weight").data()) v = -std::fabs(v);
  CHECK(activity_attribution(dead, x, 0, 1).values == Tensor({8, 8}, 0.0));
}

TEST_CASE("bias attribution") {
  std::mt19937_64 rng(34);
  const NetworkSpec spec = oracle::random_spec(rng, oracle::Family::vgg_bn, true);
  const Checkpoint biased = oracle::random_checkpoint(spec, rng, true);
  const Checkpoint unbiased = zero_bias(biased);
  const Tensor x = random_input(spec, rng);
  const Explanation ez(unbiased, x, 0);
  for (std::size_t l = 1; l <= ez.depth(); ++l) {
    const AttributionMap b = ez.bias(l);
    CHECK(b.values == Tensor(b.values.shape(), 0.0));
  }

  Checkpoint affine = build_network(linear_classifier_spec({1, 2, 2}, 3, true), 1);
  affine.param("layer1.bias") = Tensor({3}, {0.25, -1.5, 3.0});
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(bias_attribution(affine, random_input(affine.spec, rng), c, 1).values.sum() ==
          affine.param("layer1.bias")[c]);
  }

  const Explanation e(biased, x, 1);
  double total = e.activity(0).values.sum();
  for (std::size_t l = 1; l <= e.depth(); ++l) total += e.bias(l).values.sum();
  CHECK(std::fabs(total - e.logit()) <= tol(e.logit()));
  for (std::size_t l = 1; l <= e.depth(); ++l) {
    CHECK(e.bias(l).values.sum() == doctest::Approx(e.bias_parameter_sum(l)).epsilon(1e-10));
  }

  // Layers without bias-role parameters are flagged and contribute nothing.
  const Checkpoint no_head_bias = oracle::random_checkpoint(vgg_mini_spec({1, 8, 8}, 2, {2}, false), rng, false);
  const AttributionMap top = bias_attribution(no_head_bias, random_input(no_head_bias.spec, rng), 0, 2);
  CHECK(top.no_bias);
  CHECK(top.values == Tensor(top.values.shape(), 0.0));
}

TEST_CASE("decomposition report") {
  std::mt19937_64 rng(35);
  for (auto family : {oracle::Family::vgg, oracle::Family::vgg_bn, oracle::Family::resnet}) {
    const NetworkSpec spec = oracle::random_spec(rng, family, true);
    const Checkpoint biased = oracle::random_checkpoint(spec, rng, true);
    const Tensor x = random_input(spec, rng);
    const DecompositionReport r = decomposition_report(biased, x, 0);
    CHECK(r.logit == forward_logits(biased, x).at(0, 0));
    CHECK(r.residuals.size() == attribution_stages(spec).size() + 1);
    for (double res : r.residuals) CHECK(res <= tol(r.logit));

    const DecompositionReport z = decomposition_report(zero_bias(biased), x, 0);
    for (std::size_t l = 0; l < z.activity_sums.size(); ++l) {
      CHECK(z.residuals[l] <= tol(z.logit));
      CHECK(std::fabs(z.activity_sums[l] - z.logit) <= tol(z.logit));
      CHECK(z.bias_sums[l] == 0.0);
    }
  }
}

TEST_CASE("psi and rescale") {
  CHECK(rescale(Tensor({3}, {-2, 0, 2})) == Tensor({3}, {0, 0.5, 1}));
  CHECK(rescale(Tensor({2, 2}, 4.2)) == Tensor({2, 2}, 0.0));

  std::mt19937_64 rng(36);
  AttributionMap m;
  m.values = oracle::random_tensor({3, 3}, rng, -5, 5);
  m.features = oracle::random_tensor({2, 3, 3}, rng, -5, 5);
  const SaliencyMap both = psi(m, PsiConfig::aggregation(), 9, 9);
  CHECK(both.values.shape() == Shape{9, 9});
  CHECK(both.values.min() >= 0.0);
  CHECK(both.values.max() <= 1.0);
  const SaliencyMap plain = psi(m, PsiConfig::single_layer(), 9, 9);
  CHECK(plain.values.min() >= 0.0);
  CHECK(plain.values.max() == doctest::Approx(abs(m.values).max()));

  PsiConfig feat = PsiConfig::aggregation();
  feat.granularity = Granularity::per_feature;
  const SaliencyMap pf = psi(m, feat, 3, 3);
  CHECK(pf.values.max() <= 2.0);
  PsiConfig bad = PsiConfig::single_layer();
  bad.granularity = Granularity::per_feature;
  CHECK_THROWS_AS(psi(m, bad, 3, 3), std::invalid_argument);
  CHECK_THROWS_AS(psi(m, PsiConfig::aggregation(), 2, 2), std::invalid_argument);

  // abs of any attribution map is a valid saliency map.
  const Tensor s = abs(m.values);
  CHECK(s.min() >= 0.0);
}

TEST_CASE("fullgrad") {
  std::mt19937_64 rng(37);
  const NetworkSpec spec = oracle::random_spec(rng, oracle::Family::vgg_bn, true);
  const Checkpoint biased = oracle::random_checkpoint(spec, rng, true);
  const Checkpoint unbiased = zero_bias(biased);
  const Tensor x = random_input(spec, rng);
  const SaliencyMap input_term = psi(gradient_times_input(unbiased, x, 0), PsiConfig::aggregation(),
                                     spec.input.height, spec.input.width);
  for (auto g : {Granularity::per_feature, Granularity::per_layer}) {
    const SaliencyMap z = fullgrad_saliency(unbiased, x, 0, g);
    CHECK(z.values == input_term.values);
    CHECK_FALSE(z.warnings.empty());
    const SaliencyMap b = fullgrad_saliency(biased, x, 0, g);
    CHECK(b.warnings.empty());
    CHECK(b.values.shape() == Shape{spec.input.height, spec.input.width});
    CHECK(b.values.min() >= 0.0);
  }

  // Affine net: input term rescale(|w_c x|); the bias term lives on a 1x1 grid
  // and rescales to zero.
  Checkpoint affine = build_network(linear_classifier_spec({1, 2, 2}, 2, true), 1);
  affine.param("layer1.weight") = Tensor({2, 4}, {1, -2, 3, 0.5, 0, 0, 0, 0});
  affine.param("layer1.bias") = Tensor({2}, {7, 0});
  const Tensor xa({1, 1, 2, 2}, {0.5, 0.5, 1.0, 2.0});
  // |w x| = [0.5, 1, 3, 1] -> rescale -> [0, 0.2, 1, 0.2]
  const SaliencyMap fa = fullgrad_saliency(affine, xa, 0, Granularity::per_layer);
  const std::vector<double> expect{0, 0.2, 1, 0.2};
  for (std::size_t i = 0; i < 4; ++i) CHECK(fa.values[i] == doctest::Approx(expect[i]));
}

TEST_CASE("aggregate activity saliency") {
  std::mt19937_64 rng(38);
  const NetworkSpec spec = vgg_mini_spec({1, 8, 8}, 3, {3, 4}, true);
  const Checkpoint net = oracle::random_checkpoint(spec, rng, true);
  const Tensor x = random_input(spec, rng);
  const Explanation e(net, x);
  const PsiConfig cfg = PsiConfig::aggregation();
  const std::size_t L = e.depth();
  CHECK(e.aggregate_activity(L).values == psi(e.activity(L), cfg, 8, 8).values);
  for (std::size_t l0 = 0; l0 < L; ++l0) {
    const Tensor diff = e.aggregate_activity(l0).values + e.aggregate_activity(l0 + 1).values * -1.0;
    CHECK(max_relative_difference(diff, psi(e.activity(l0), cfg, 8, 8).values) < 1e-12);
  }
  CHECK(e.aggregate_activity(0).values.max() <= static_cast<double>(L + 1));

  // One attribution stage: every hidden-layer start gives the same map.
  const Checkpoint lin = oracle::random_checkpoint(linear_classifier_spec({1, 4, 4}, 3, true), rng, true);
  const Explanation el(lin, oracle::random_tensor({1, 1, 4, 4}, rng));
  REQUIRE(el.depth() == 1);
  CHECK(el.aggregate_activity(1).values == psi(el.activity(1), cfg, 4, 4).values);
}

TEST_CASE("gradcam") {
  std::mt19937_64 rng(39);
  // Stage 2 of this net sits on a 1x1 grid.
  NetworkSpec tiny_spec{"tiny", {1, 2, 2}, 2, {}};
  tiny_spec.layers = {{.kind = LayerKind::conv, .features = 3, .padding = 1},
                      {.kind = LayerKind::relu},
                      {.kind = LayerKind::maxpool, .stride = 2, .window = 2},
                      {.kind = LayerKind::conv, .features = 3, .padding = 1},
                      {.kind = LayerKind::relu},
                      {.kind = LayerKind::flatten},
                      {.kind = LayerKind::dense, .features = 2}};
  const Checkpoint tiny = oracle::random_checkpoint(tiny_spec, rng, true);
  const Explanation et(tiny, oracle::random_tensor({1, 1, 2, 2}, rng, 0, 1));
  REQUIRE(et.grid(2) == std::pair<std::size_t, std::size_t>{1, 1});
  CHECK(et.gradcam(2).values == et.activity(2).values);
  CHECK_THROWS_AS(et.gradcam(3), std::invalid_argument);

  // Weights constant across positions give a position-independent input gradient.
  Checkpoint lin = build_network(linear_classifier_spec({2, 3, 3}, 2, false), 1);
  Tensor& w = lin.param("layer1.weight");
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < 18; ++k) w.at(c, k) = (k < 9 ? 0.5 : -1.25) * (c + 1.0);
  const Explanation el(lin, oracle::random_tensor({1, 2, 3, 3}, rng), 1);
  CHECK(max_relative_difference(el.gradcam(0).values, el.activity(0).values) < 1e-14);

  // Direct evaluation of sum_phi h_ij * mean_ij(g) with explicit loops.
  const NetworkSpec spec = vgg_mini_spec({2, 8, 8}, 3, {3, 4}, true);
  const Checkpoint net = oracle::random_checkpoint(spec, rng, true);
  const Explanation e(net, random_input(spec, rng), 1);
  for (std::size_t l : {1, 2}) {
    const Tensor& h = e.activity_value(l);
    const Tensor& g = e.activity_gradient(l);
    const std::size_t f = h.dim(1), H = h.dim(2), W = h.dim(3);
    Tensor ref({H, W}), rect({H, W});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < f; ++k) {
          double pooled = 0.0;
          for (std::size_t yy = 0; yy < H; ++yy)
            for (std::size_t xx = 0; xx < W; ++xx) pooled += g.at(0, k, yy, xx);
          s += h.at(0, k, y, x) * pooled / static_cast<double>(H * W);
        }
        ref.at(y, x) = s;
        rect.at(y, x) = std::max(s, 0.0);
      }
    CHECK(max_relative_difference(e.gradcam(l).values, ref) < 1e-12);
    CHECK(max_relative_difference(e.gradcam(l, true).values, rect) < 1e-12);
  }
}

TEST_CASE("heatmap rendering") {
  const fs::path dir = fs::temp_directory_path() / "saliency-unit-heatmap";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const RgbImage white = colorize(Tensor({3, 2}, 0.0), {Palette::diverging, 1, nullptr});
  for (auto p : white.pixels) CHECK(p == 255);

  const RgbImage rb = colorize(Tensor({1, 3}, {2.0, 0.0, -2.0}), {Palette::diverging, 1, nullptr});
  CHECK(std::vector<std::uint8_t>(rb.pixels.begin(), rb.pixels.begin() + 3) == std::vector<std::uint8_t>{255, 0, 0});
  CHECK(std::vector<std::uint8_t>(rb.pixels.end() - 3, rb.pixels.end()) == std::vector<std::uint8_t>{0, 0, 255});

  const Tensor golden({4, 4}, {0.0, 0.5, 1.0, 2.0, -0.5, -1.0, -2.0, 0.25, 0.0, 0.0, 1.5, -1.5, 0.125, -0.125, 0.75, -0.75});
  AttributionMap a;
  a.values = golden;
  render_heatmap(a, (dir / "golden.ppm").string());
  CHECK(slurp(dir / "golden.ppm") == slurp(fixtures / "heatmap4x4.ppm"));

  SaliencyMap s;
  s.values = abs(golden);
  const Tensor overlay({1, 1, 4, 4}, 0.5);
  render_heatmap(s, (dir / "s.png").string(), 3, &overlay);
  const std::string png = slurp(dir / "s.png");
  REQUIRE(png.size() > 8);
  CHECK(png.substr(1, 3) == "PNG");
  const RgbImage zoomed = colorize(s.values, {Palette::sequential, 3, &overlay});
  CHECK(zoomed.width == 12);

  try {
    render_heatmap(a, "/nonexistent-dir/x.ppm");
    FAIL("expected OutputError");
  } catch (const OutputError& e) {
    CHECK(std::string(e.what()).find("/nonexistent-dir/x.ppm") != std::string::npos);
  }
  CHECK_THROWS_AS(render_heatmap(a, (dir / "x.bmp").string()), OutputError);
}
