#include "saliency/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "saliency/ops.hpp"

namespace saliency {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd or adam)");
}

ParameterOptimizer::ParameterOptimizer(OptimizerKind kind, double learning_rate)
    : kind_(kind), learning_rate_(learning_rate) {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
}

void ParameterOptimizer::step(Checkpoint& ckpt, const std::map<std::string, Tensor>& grads) {
  ++t_;
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = ckpt.param(name);
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate_ * g[i];
      continue;
    }
    auto [mit, m_new] = m_.try_emplace(name, g.shape());
    auto [vit, v_new] = v_.try_emplace(name, g.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      p[i] -= learning_rate_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const Tensor p = ops::softmax(logits);
  const std::size_t n = logits.dim(0);
  LossAndGrad out{0.0, p};
  for (std::size_t b = 0; b < n; ++b) {
    out.loss -= std::log(std::max(p.at(b, labels[b]), 1e-300));
    out.grad.at(b, labels[b]) -= 1.0;
  }
  out.loss /= static_cast<double>(n);
  out.grad *= 1.0 / static_cast<double>(n);
  return out;
}

double gradient_step(Checkpoint& ckpt, const Tensor& batch, std::span<const std::size_t> indices,
                     const LogitLoss& loss, const std::set<std::string>& trainable,
                     ParameterOptimizer& optimizer) {
  TapedForward tf = forward_taped(ckpt, batch, false);
  for (const auto& [name, id] : tf.param_nodes) {
    if (trainable.count(name)) tf.graph.track(id);
  }
  const LossAndGrad lg = loss(tf.graph.value(tf.logits), indices);
  if (!std::isfinite(lg.loss)) return lg.loss;
  const GradientMap grads = tf.graph.backward(tf.logits, lg.grad);
  std::map<std::string, Tensor> named;
  for (const auto& [name, id] : tf.param_nodes) {
    if (trainable.count(name)) named.emplace(name, grads.at(id));
  }
  optimizer.step(ckpt, named);
  return lg.loss;
}

std::set<std::string> default_trainable(const Checkpoint& ckpt) {
  std::set<std::string> names;
  for (const auto& [name, t] : ckpt.params) {
    const std::string role = name.substr(name.find('.') + 1);
    if (role != "mean" && role != "var") names.insert(name);
  }
  return names;
}

bool all_finite(const Checkpoint& ckpt) {
  for (const auto& [name, t] : ckpt.params) {
    for (double v : t.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

TrainResult train_classifier(const Checkpoint& ckpt, const Dataset& train, const TrainConfig& config) {
  if (train.split != Split::train) throw std::invalid_argument("train_classifier needs a train split");
  train.validate();
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  check_parameters(ckpt);
  TrainResult result{ckpt, {}, false};
  ParameterOptimizer opt(config.optimizer, config.learning_rate);
  const auto trainable = default_trainable(ckpt);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const LogitLoss ce = [&](const Tensor& logits, std::span<const std::size_t> idx) {
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) labels.push_back(train.labels[i]);
    return softmax_cross_entropy(logits, labels);
  };
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with raw engine output keeps the order identical across standard libraries.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Checkpoint before = result.checkpoint;
      const double loss = gradient_step(result.checkpoint, train.batch(idx), idx, ce, trainable, opt);
      if (!std::isfinite(loss) || !all_finite(result.checkpoint)) {
        result.checkpoint = std::move(before);
        result.diverged = true;
        return result;
      }
      result.loss_history.push_back(loss);
      if (config.max_steps != 0 && ++steps >= config.max_steps) return result;
    }
  }
  return result;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  }
  return best;
}

double topk_accuracy(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("logits " + shape_string(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t label = labels[b];
    const double v = logits.at(b, label);
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double u = logits.at(b, j);
      if (u > v || (u == v && j < label)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

Tensor dataset_logits(const Checkpoint& ckpt, const Dataset& data) {
  constexpr std::size_t chunk = 128;
  Tensor out({data.size(), ckpt.spec.classes});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor logits = forward_logits(ckpt, data.batch(idx));
    std::copy(logits.data().begin(), logits.data().end(),
              out.data().begin() + static_cast<long>(start * ckpt.spec.classes));
  }
  return out;
}

double evaluate_topk(const Checkpoint& ckpt, const Dataset& data, std::size_t k) {
  if (k == 0 || k >= ckpt.spec.classes) {
    throw std::invalid_argument("top-k needs 1 <= k < " + std::to_string(ckpt.spec.classes));
  }
  return topk_accuracy(dataset_logits(ckpt, data), data.labels, k);
}

}  // namespace saliency
