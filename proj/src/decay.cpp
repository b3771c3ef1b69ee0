#include "saliency/decay.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "saliency/analysis.hpp"
#include "saliency/ops.hpp"
#include "saliency/perturbation.hpp"

namespace saliency {

std::string to_string(DecayKind kind) { return kind == DecayKind::linear ? "linear" : "exponential"; }

DecayKind decay_kind_from_string(const std::string& name) {
  if (name == "linear") return DecayKind::linear;
  if (name == "exponential") return DecayKind::exponential;
  throw std::invalid_argument("unknown decay kind '" + name + "' (expected exponential or linear)");
}

void DecaySchedule::validate() const {
  if (decay_steps == 0) throw std::invalid_argument("decay needs at least one rescale step");
  if (kind == DecayKind::exponential && !(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("exponential decay ratio must lie in (0, 1)");
  }
}

double DecaySchedule::scale(std::size_t k) const {
  if (k >= decay_steps) return 0.0;
  if (kind == DecayKind::linear) return 1.0 - static_cast<double>(k) / static_cast<double>(decay_steps);
  return std::pow(ratio, static_cast<double>(k));
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
}

LossAndGrad distillation_loss(const Tensor& student, const Tensor& teacher, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (student.shape() != teacher.shape() || student.rank() != 2) {
    throw ShapeError("student logits " + shape_string(student.shape()) + " and teacher logits " +
                     shape_string(teacher.shape()) + " differ");
  }
  const Tensor ps = ops::softmax(student, temperature);
  const Tensor pt = ops::softmax(teacher, temperature);
  const std::size_t n = student.dim(0), c = student.dim(1);
  LossAndGrad out{0.0, Tensor(student.shape())};
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < c; ++j) {
      out.loss -= pt.at(b, j) * std::log(std::max(ps.at(b, j), 1e-300));
      out.grad.at(b, j) = (ps.at(b, j) - pt.at(b, j)) / (temperature * static_cast<double>(n));
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

namespace {

std::set<std::string> weight_parameters(const Checkpoint& ckpt) {
  std::set<std::string> names;
  for (std::size_t i = 0; i < ckpt.spec.layers.size(); ++i) {
    const LayerKind k = ckpt.spec.layers[i].kind;
    if (k == LayerKind::conv || k == LayerKind::dense) names.insert(parameter_name(i, "weight"));
  }
  return names;
}

void set_bias_scale(Checkpoint& ckpt, const Checkpoint& original, double scale) {
  for (const std::string& name : bias_parameter_names(original)) {
    const Tensor& src = original.param(name);
    Tensor& dst = ckpt.param(name);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = scale == 0.0 ? 0.0 : scale * src[i];
  }
}

// Endless stream of shuffled mini-batches.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(batch), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = order_.size();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> idx;
    while (idx.size() < batch_ && !order_.empty()) {
      if (pos_ == order_.size()) {
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
        pos_ = 0;
        if (!idx.empty()) break;  // batches never straddle an epoch boundary
      }
      idx.push_back(order_[pos_++]);
    }
    return idx;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace

DecayResult run_decay(const Checkpoint& student, const Checkpoint& teacher, const Dataset& train,
                      const Dataset& eval, const DecaySchedule& schedule, const DistillConfig& config) {
  schedule.validate();
  config.validate();
  if (spec_fingerprint(student.spec) != spec_fingerprint(teacher.spec)) {
    throw std::invalid_argument("student and teacher architectures differ");
  }
  train.validate();
  eval.validate();

  const Tensor teacher_eval = dataset_logits(teacher, eval);
  const Tensor teacher_train = dataset_logits(teacher, train);
  const std::size_t classes = teacher.spec.classes;
  const std::set<std::string> trainable = weight_parameters(student);

  DecayResult result{student, {}};
  const Checkpoint original = student;
  auto record = [&](std::size_t k, double scale) {
    const Tensor logits = dataset_logits(result.checkpoint, eval);
    result.trajectory.steps.push_back({k, scale, distillation_loss(logits, teacher_eval, config.temperature).loss,
                                       topk_accuracy(logits, eval.labels, 1)});
  };
  record(0, 1.0);

  ParameterOptimizer opt(config.optimizer, config.learning_rate);
  BatchStream stream(train.size(), config.batch_size, config.seed);
  const LogitLoss loss = [&](const Tensor& logits, std::span<const std::size_t> idx) {
    Tensor target({idx.size(), classes});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (std::size_t j = 0; j < classes; ++j) target.at(b, j) = teacher_train.at(idx[b], j);
    }
    return distillation_loss(logits, target, config.temperature);
  };
  // Returns false when training diverged and the last good state was restored.
  auto fine_tune = [&](std::size_t steps) {
    for (std::size_t s = 0; s < steps; ++s) {
      const std::vector<std::size_t> idx = stream.next();
      Checkpoint before = result.checkpoint;
      const double l = gradient_step(result.checkpoint, train.batch(idx), idx, loss, trainable, opt);
      if (!std::isfinite(l) || !all_finite(result.checkpoint)) {
        result.checkpoint = std::move(before);
        result.trajectory.diverged = true;
        return false;
      }
    }
    return true;
  };

  for (std::size_t k = 1; k <= schedule.decay_steps; ++k) {
    const double scale = schedule.scale(k);
    set_bias_scale(result.checkpoint, original, scale);
    if (!fine_tune(schedule.train_steps)) return result;
    record(k, scale);
  }
  if (schedule.finetune_steps > 0) {
    if (!fine_tune(schedule.finetune_steps)) return result;
    record(schedule.decay_steps + 1, 0.0);
  }
  return result;
}

RecoveryReport recovery_report(const DecayTrajectory& trajectory, double teacher_accuracy) {
  if (!(teacher_accuracy > 0.0)) throw std::invalid_argument("teacher accuracy must be positive");
  if (trajectory.steps.empty()) throw std::invalid_argument("trajectory is empty");
  RecoveryReport r;
  r.recovery = trajectory.steps.back().top1 / teacher_accuracy;
  const auto worst = std::min_element(trajectory.steps.begin(), trajectory.steps.end(),
                                      [](const DecayStep& a, const DecayStep& b) { return a.top1 < b.top1; });
  r.worst_top1 = worst->top1;
  r.worst_step = worst->step;
  return r;
}

void write_trajectory_csv(std::ostream& out, const DecayTrajectory& trajectory) {
  out << "step,bias_scale,loss,top1\n";
  for (const DecayStep& s : trajectory.steps) {
    out << s.step << ',' << format_number(s.bias_scale) << ',' << format_number(s.loss) << ','
        << format_number(s.top1) << '\n';
  }
}

}  // namespace saliency
