#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "saliency/dataset.hpp"
#include "saliency/network.hpp"
#include "saliency/training.hpp"

namespace saliency {

enum class DecayKind { exponential, linear };

std::string to_string(DecayKind kind);
DecayKind decay_kind_from_string(const std::string& name);

struct DecaySchedule {
  DecayKind kind = DecayKind::exponential;
  std::size_t decay_steps = 200;     // number of rescales
  std::size_t train_steps = 200;     // optimizer steps after each rescale
  std::size_t finetune_steps = 0;    // extra steps once biases are zero
  double ratio = 0.97;               // exponential kind only

  void validate() const;
  /// Bias scale after rescale k (k = 0 is the untouched network). The last
  /// rescale is exactly 0 for both kinds.
  double scale(std::size_t k) const;
};

struct DistillConfig {
  double temperature = 100.0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 5e-6;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Cross-entropy between softmax(teacher / T) and softmax(student / T),
/// averaged over the batch. The gradient is with respect to the student.
LossAndGrad distillation_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

struct DecayStep {
  std::size_t step = 0;
  double bias_scale = 1.0;
  double loss = 0.0;  // distillation loss on the evaluation split
  double top1 = 0.0;
};

struct DecayTrajectory {
  std::vector<DecayStep> steps;
  bool diverged = false;
};

struct DecayResult {
  Checkpoint checkpoint;
  DecayTrajectory trajectory;
};

/// Alternates bias rescaling with distillation fine-tuning of the weights;
/// bias-role parameters, gamma and var stay frozen during fine-tuning.
DecayResult run_decay(const Checkpoint& student, const Checkpoint& teacher, const Dataset& train,
                      const Dataset& eval, const DecaySchedule& schedule, const DistillConfig& config);

struct RecoveryReport {
  double recovery = 0.0;  // final top-1 / teacher top-1
  double worst_top1 = 0.0;
  std::size_t worst_step = 0;
};

RecoveryReport recovery_report(const DecayTrajectory& trajectory, double teacher_accuracy);

void write_trajectory_csv(std::ostream& out, const DecayTrajectory& trajectory);

}  // namespace saliency
