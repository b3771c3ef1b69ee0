#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "saliency/analysis.hpp"
#include "saliency/checkpoint_io.hpp"
#include "saliency/dataset.hpp"
#include "saliency/network.hpp"
#include "saliency/training.hpp"

using namespace saliency;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("saliency-unit-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const fs::path fixtures = TEST_FIXTURES_DIR;

// Two-pixel images, label 1 when the second pixel is brighter.
Dataset separable_toy(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.classes = 2;
  d.images = Tensor({n, 2, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = oracle::uniform(rng, 0, 1);
    double b = oracle::uniform(rng, 0, 1);
    if (std::fabs(a - b) < 0.1) b = a > 0.5 ? a - 0.3 : a + 0.3;
    d.images[2 * i] = a;
    d.images[2 * i + 1] = b;
    d.labels.push_back(b > a ? 1 : 0);
  }
  return d;
}

}  // namespace

TEST_CASE("build_network") {
  const NetworkSpec lin = linear_classifier_spec({1, 28, 28}, 10, false);
  const Checkpoint ck = build_network(lin, 3);
  REQUIRE(ck.params.size() == 1);
  CHECK(ck.param("layer1.weight").shape() == Shape{10, 784});

  CHECK(build_network(lin, 3) == ck);
  CHECK_FALSE(build_network(lin, 4) == ck);

  const NetworkSpec vgg = vgg_mini_spec({1, 16, 16}, 4, {4, 8, 16}, true);
  const std::size_t expected = (4 * 1 * 9 + 4) + (8 * 4 * 9 + 8) + (16 * 8 * 9 + 16) + (4 * 16 * 2 * 2 + 4);
  CHECK(build_network(vgg, 1).parameter_count() == expected);
  CHECK(attribution_stages(vgg).size() == 4);

  NetworkSpec bad = vgg_mini_spec({1, 3, 3}, 2, {2}, true);
  bad.layers[0].kernel = 5;
  bad.layers[0].padding = 0;
  try {
    build_network(bad, 0);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
}

TEST_CASE("forward_logits") {
  std::mt19937_64 rng(21);
  const NetworkSpec lin = linear_classifier_spec({1, 2, 2}, 3, false);
  Checkpoint ck = build_network(lin, 1);
  const Tensor x = oracle::random_tensor({1, 1, 2, 2}, rng);
  const Tensor y = forward_logits(ck, x);
  const Tensor& w = ck.param("layer1.weight");
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += w.at(c, k) * x[k];
    CHECK(y.at(0, c) == doctest::Approx(s).epsilon(1e-14));
  }

  const Checkpoint vgg = oracle::random_checkpoint(vgg_mini_spec({1, 8, 8}, 3, {3, 3}, false), rng, false);
  CHECK(forward_logits(vgg, Tensor({1, 1, 8, 8}, 0.0)) == Tensor({1, 3}, 0.0));
  CHECK_THROWS_AS(forward_logits(vgg, Tensor({1, 2, 8, 8})), ShapeError);
  const Tensor xv = oracle::random_tensor({1, 1, 8, 8}, rng);
  CHECK(forward_activations(vgg, xv) == forward_activations(vgg, xv));

  // Two dense layers against explicit matrix arithmetic.
  const Checkpoint mlp = oracle::random_checkpoint(mlp_spec(3, {4}, 2, true), rng, true);
  const Tensor xm = oracle::random_tensor({1, 3, 1, 1}, rng);
  const Tensor& w1 = mlp.param("layer1.weight");
  const Tensor& b1 = mlp.param("layer1.bias");
  const Tensor& w2 = mlp.param("layer3.weight");
  const Tensor& b2 = mlp.param("layer3.bias");
  const Tensor ym = forward_logits(mlp, xm);
  for (std::size_t c = 0; c < 2; ++c) {
    double f = b2[c];
    for (std::size_t j = 0; j < 4; ++j) {
      double h = b1[j];
      for (std::size_t k = 0; k < 3; ++k) h += w1.at(j, k) * xm[k];
      f += w2.at(c, j) * std::max(h, 0.0);
    }
    CHECK(ym.at(0, c) == doctest::Approx(f).epsilon(1e-14));
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  std::mt19937_64 rng(22);
  const fs::path dir = scratch("ckpt");
  for (auto family : {oracle::Family::vgg, oracle::Family::vgg_bn, oracle::Family::resnet}) {
    const Checkpoint ck = oracle::random_checkpoint(oracle::random_spec(rng, family, true), rng, true);
    save_checkpoint(ck, (dir / "a.bin").string());
    CHECK(load_checkpoint((dir / "a.bin").string()) == ck);
  }
  std::map<std::string, Tensor> dump{{"m", oracle::random_tensor({3, 5}, rng)}, {"n", Tensor({1}, -0.0)}};
  save_tensors(dump, (dir / "t.bin").string());
  CHECK(load_tensors((dir / "t.bin").string()) == dump);
}

TEST_CASE("training") {
  SUBCASE("separable two-pixel toy") {
    const Dataset d = separable_toy(200, 5);
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.batch_size = 20;
    cfg.learning_rate = 0.1;
    cfg.max_steps = 200;
    const auto r = train_classifier(build_network(linear_classifier_spec({1, 2, 1}, 2, true), 2), d, cfg);
    CHECK(r.loss_history.size() <= 200);
    CHECK(evaluate_topk(r.checkpoint, d, 1) >= 0.99);
    CHECK(r.loss_history.back() < r.loss_history.front());
  }
  SUBCASE("zero learning rate leaves the checkpoint unchanged") {
    const Dataset d = separable_toy(40, 6);
    const Checkpoint start = build_network(linear_classifier_spec({1, 2, 1}, 2, true), 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 0.0;
    cfg.optimizer = OptimizerKind::sgd;
    CHECK(train_classifier(start, d, cfg).checkpoint == start);
  }
  SUBCASE("patch dataset with VGG-mini") {
    const Dataset train = synth_patch_dataset(7, 2000, 4, Split::train);
    const Dataset test = synth_patch_dataset(8, 200, 4, Split::test);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.003;
    cfg.seed = 1;
    const auto r = train_classifier(build_network(vgg_mini_spec({1, 16, 16}, 4, {4, 8, 16}, true), 1), train, cfg);
    CHECK(evaluate_topk(r.checkpoint, test, 1) >= 0.95);
  }
  CHECK_THROWS(train_classifier(build_network(linear_classifier_spec({1, 2, 1}, 2, true), 2),
                                synth_patch_dataset(1, 4, 2, Split::test, {8, 1, 0.3, 0.7}), TrainConfig{}));
}

TEST_CASE("top-k accuracy") {
  const std::vector<std::size_t> labels{0, 1, 2, 1};
  Tensor perfect({4, 3}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) perfect.at(i, labels[i]) = 1.0;
  CHECK(topk_accuracy(perfect, labels, 1) == 1.0);

  std::mt19937_64 rng(23);
  const Tensor noisy = oracle::random_tensor({4, 3}, rng);
  CHECK(topk_accuracy(noisy, labels, 2) >= topk_accuracy(noisy, labels, 1));

  // Ties rank the lower class first.
  const Tensor tied({1, 3}, 0.0);
  CHECK(topk_accuracy(tied, std::vector<std::size_t>{0}, 1) == 1.0);
  CHECK(topk_accuracy(tied, std::vector<std::size_t>{2}, 2) == 0.0);

  std::vector<std::size_t> balanced(1000);
  for (std::size_t i = 0; i < balanced.size(); ++i) balanced[i] = i % 10;
  const double top1 = topk_accuracy(oracle::random_tensor({1000, 10}, rng), balanced, 1);
  CHECK(std::fabs(top1 - 0.1) <= 0.03);
}

TEST_CASE("zero_bias") {
  std::mt19937_64 rng(24);
  const Checkpoint free_net = oracle::random_checkpoint(oracle::random_spec(rng, oracle::Family::vgg, false), rng, false);
  CHECK(zero_bias(free_net) == free_net);

  Checkpoint lin = build_network(linear_classifier_spec({1, 2, 2}, 3, true), 5);
  lin.param("layer1.bias") = Tensor({3}, {0.5, -1.25, 2.0});
  const Tensor x = oracle::random_tensor({1, 1, 2, 2}, rng);
  const Tensor with = forward_logits(lin, x), without = forward_logits(zero_bias(lin), x);
  for (std::size_t c = 0; c < 3; ++c) CHECK(without.at(0, c) == doctest::Approx(with.at(0, c) - lin.param("layer1.bias")[c]));

  const Checkpoint bn = oracle::random_checkpoint(oracle::random_spec(rng, oracle::Family::resnet, true), rng, true);
  const Checkpoint z = zero_bias(bn);
  CHECK(is_bias_free(z));
  CHECK_FALSE(is_bias_free(bn));
  CHECK(zero_bias(z) == z);
  for (const auto& [name, t] : bn.params) {
    const std::string role = name.substr(name.find('.') + 1);
    if (role == "gamma" || role == "var" || role == "weight") CHECK(z.param(name) == t);
  }
  std::vector<double> a, b;
  for (int i = 0; i < 20; ++i) {
    const Tensor xi = oracle::random_tensor({1, bn.spec.input.channels, bn.spec.input.height, bn.spec.input.width}, rng, 0, 1);
    const Tensor ya = forward_logits(bn, xi), yb = forward_logits(z, xi);
    CHECK_FALSE(ya == yb);
    a.insert(a.end(), ya.data().begin(), ya.data().end());
    b.insert(b.end(), yb.data().begin(), yb.data().end());
  }
  const double r = pearson_correlation(a, b);
  CHECK(std::isfinite(r));
  CHECK(std::fabs(r) <= 1.0);
}

TEST_CASE("scale and shift sweep") {
  std::mt19937_64 rng(25);
  const Checkpoint net = oracle::random_checkpoint(vgg_mini_spec({1, 8, 8}, 3, {3}, false), rng, false);
  const Dataset d = synth_patch_dataset(3, 60, 3, Split::test, {8, 1, 0.3, 0.7});
  const std::vector<double> scales{0.001, 0.1, 1, 10, 1000}, shifts{0};
  const auto cells = scale_shift_sweep(net, d, scales, shifts);
  REQUIRE(cells.size() == 5);
  for (const auto& c : cells) CHECK(c.top1 == evaluate_topk(net, d, 1));

  // Bias dominates at unit scale: f0 = x, f1 = x/2 + 1 on a single-pixel input x = 1 labelled 1.
  Checkpoint biased = build_network(linear_classifier_spec({1, 1, 1}, 2, true), 0);
  biased.param("layer1.weight") = Tensor({2, 1}, {1.0, 0.5});
  biased.param("layer1.bias") = Tensor({2}, {0.0, 1.0});
  Dataset one;
  one.classes = 2;
  one.images = Tensor({1, 1, 1, 1}, 1.0);
  one.labels = {1};
  const std::vector<double> s2{1, 1000};
  const auto c2 = scale_shift_sweep(biased, one, s2, shifts);
  CHECK(c2[0].top1 == 1.0);
  CHECK(c2[1].top1 == 0.0);
  const std::vector<double> bad{0.0};
  CHECK_THROWS(scale_shift_sweep(biased, one, bad, shifts));
}

TEST_CASE("output regression") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> y2, y1;
  for (double v : x) {
    y2.push_back(2 * v);
    y1.push_back(v + 1);
  }
  auto f = fit_output_regression(x, y2);
  CHECK(f.alpha == doctest::Approx(2.0));
  CHECK(f.beta == doctest::Approx(0.0));
  CHECK(f.residual_norm == doctest::Approx(0.0));
  f = fit_output_regression(x, y1);
  CHECK(f.alpha == doctest::Approx(1.0));
  CHECK(f.beta == doctest::Approx(1.0));

  std::mt19937_64 rng(26);
  std::normal_distribution<double> noise(0.0, 0.1), spread(0.0, 1.0);
  std::vector<double> vx, vy;
  for (int i = 0; i < 1000; ++i) {
    vx.push_back(spread(rng));
    vy.push_back(0.8 * vx.back() + noise(rng));
  }
  f = fit_output_regression(vx, vy);
  CHECK(std::fabs(f.alpha - 0.8) <= 0.05);
  CHECK(f.residual_norm >= 0.0);
  const std::vector<double> flat{1, 1, 1};
  CHECK_THROWS_AS(fit_output_regression(flat, flat), std::invalid_argument);
}

TEST_CASE("IDX fixture") {
  const Dataset d = ingest_idx((fixtures / "tiny-images.idx3-ubyte").string(),
                               (fixtures / "tiny-labels.idx1-ubyte").string(), Split::test);
  CHECK(d.images.shape() == Shape{4, 2, 3, 1});
  CHECK(d.labels == std::vector<std::size_t>{3, 0, 2, 1});
  CHECK(d.classes == 4);
  // Byte k of image n is 17 * (6n + k) mod 256.
  CHECK(d.images[0] == 0.0);
  CHECK(d.images[1] == 17.0 / 255.0);
  CHECK(d.images[2 * 6 + 5] == 33.0 / 255.0);
  CHECK(d.images[3 * 6 + 2] == 84.0 / 255.0);
  CHECK(d.image(1).shape() == Shape{1, 1, 2, 3});

  const fs::path dir = scratch("idx");
  export_idx(d, (dir / "i").string(), (dir / "l").string());
  const Dataset back = ingest_idx((dir / "i").string(), (dir / "l").string(), Split::test);
  CHECK(back.images == d.images);
  CHECK(back.labels == d.labels);

  std::ifstream in(fixtures / "tiny-images.idx3-ubyte", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  bytes[2] = 0x0D;
  std::ofstream(dir / "bad", std::ios::binary) << bytes;
  try {
    read_idx((dir / "bad").string());
    FAIL("expected IdxFormatError");
  } catch (const IdxFormatError& e) {
    CHECK(e.offset() == 2);
  }
  std::ofstream(dir / "short", std::ios::binary) << bytes.substr(0, 30).replace(2, 1, 1, '\x08');
  try {
    read_idx((dir / "short").string());
    FAIL("expected IdxFormatError");
  } catch (const IdxFormatError& e) {
    CHECK(e.offset() == 30);
  }

  std::ofstream(dir / "data.ini") << "[dataset]\nclasses=4\n[train]\nimages=i\nlabels=l\n[test]\nimages=i\nlabels=l\n";
  const DatasetPair pair = load_dataset_manifest((dir / "data.ini").string());
  CHECK(pair.train.size() == 4);
  CHECK(pair.test.split == Split::test);
}

TEST_CASE("synthetic patch labels follow the patch position") {
  const Dataset d = synth_patch_dataset(9, 50, 4, Split::train);
  for (std::size_t n = 0; n < d.size(); ++n) {
    const Tensor m = d.mask(n);
    double sy = 0, sx = 0, count = 0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        if (m.at(y, x) > 0) {
          sy += y;
          sx += x;
          ++count;
          CHECK(d.images[(n * 16 + y) * 16 + x] >= 0.7);
        }
    REQUIRE(count > 0);
    const std::size_t quadrant = (sy / count >= 8 ? 2 : 0) + (sx / count >= 8 ? 1 : 0);
    CHECK(d.labels[n] == quadrant);
  }
}

TEST_CASE("argmax scale invariance of bias-free nets") {
  std::mt19937_64 rng(27);
  for (int trial = 0; trial < 10; ++trial) {
    const NetworkSpec spec = oracle::random_spec(rng, oracle::Family::vgg, false);
    const Checkpoint ck = oracle::random_checkpoint(spec, rng, false);
    const Tensor x = oracle::random_tensor({1, spec.input.channels, spec.input.height, spec.input.width}, rng, 0, 1);
    const std::size_t c = argmax_row(forward_logits(ck, x));
    for (double a : {0.001, 0.37, 12.5, 1000.0}) CHECK(argmax_row(forward_logits(ck, x * a)) == c);
  }
}
