#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "saliency/dataset.hpp"
#include "saliency/network.hpp"

namespace saliency {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

/// Plain SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8) over named parameters.
class ParameterOptimizer {
 public:
  ParameterOptimizer(OptimizerKind kind, double learning_rate);

  void step(Checkpoint& ckpt, const std::map<std::string, Tensor>& grads);
  double learning_rate() const { return learning_rate_; }

 private:
  OptimizerKind kind_;
  double learning_rate_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

/// Loss of a batch and its gradient w.r.t. the logits.
struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};
using LogitLoss = std::function<LossAndGrad(const Tensor& logits, std::span<const std::size_t> batch)>;

/// Mean softmax cross-entropy of [N, C] logits against labels.
LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// One gradient step on `trainable` parameters. Returns the batch loss.
double gradient_step(Checkpoint& ckpt, const Tensor& batch, std::span<const std::size_t> indices,
                     const LogitLoss& loss, const std::set<std::string>& trainable,
                     ParameterOptimizer& optimizer);

/// Every parameter except frozen batchnorm statistics (mean, var).
std::set<std::string> default_trainable(const Checkpoint& ckpt);

bool all_finite(const Checkpoint& ckpt);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  /// Stop after this many steps when non-zero.
  std::size_t max_steps = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> loss_history;  // one entry per step
  bool diverged = false;             // a non-finite loss stopped training
};

/// Softmax cross-entropy training. On a non-finite loss the last good
/// checkpoint is returned with `diverged` set.
TrainResult train_classifier(const Checkpoint& ckpt, const Dataset& train, const TrainConfig& config);

/// Fraction of rows whose label is among the k largest logits; ties rank the
/// lower class index first.
double topk_accuracy(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k);

/// Logits of the whole dataset, [N, C].
Tensor dataset_logits(const Checkpoint& ckpt, const Dataset& data);

/// Requires 1 <= k < C.
double evaluate_topk(const Checkpoint& ckpt, const Dataset& data, std::size_t k);

/// Index of the largest entry of row `row`; lowest index on ties.
std::size_t argmax_row(const Tensor& logits, std::size_t row = 0);

}  // namespace saliency
