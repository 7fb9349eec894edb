#pragma once

// Domain-Adaptive On-Policy Distillation: EMA teacher update, clean-view
// consistency, temperature-scaled reverse KL on policy-sampled views, the
// augmentation reward, and the student -> policy -> teacher step schedule.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "moase/model.hpp"
#include "moase/numeric.hpp"
#include "moase/policy.hpp"

namespace moase {

struct DaopdConfig {
  double ema_alpha = 0.999;
  std::size_t views = 2;
  double temperature = 1.0;
  double opd_weight = 0.5;       // omega
  double strength_penalty = 0.1; // lambda on ||a||^2
  double policy_beta = 0.01;     // entropy bonus
  double baseline_momentum = 0.9;
  double restore_rate = 0.001;
  bool rl_enabled = true;
  double fixed_strength = 0.5;   // used when the RL branch is off
  // Student train-mode stochasticity for learning passes; keeps the student
  // off the exact student==teacher stationary point and regularizes toward
  // low-density boundaries. Teacher and evaluation forwards always run clean.
  double student_dropout = 0.1;
  double train_input_noise = 0.0;  // additive sigma on learning-pass inputs

  void validate() const;
};

// EMA of past rewards; the first observed reward seeds it.
struct RewardBaseline {
  double value = 0.0;
  bool initialized = false;

  void update(double reward_value, double momentum);
};

struct LossResult {
  double value = 0.0;
  Tensor dlogits;  // d(value)/d(student logits)
};

// Mean over the batch of -<p_T, log p_theta> at temperature 1; the teacher
// side is a constant.
LossResult consistency_loss(const Tensor& student_logits, const Tensor& teacher_logits);

// Mean over the batch of KL(softmax(z_s/T) || softmax(z_t/T)). The reported
// value is the raw KL; the gradient carries the T^2 correction.
LossResult daopd_view_kl(const Tensor& student_logits, const Tensor& teacher_logits,
                         double temperature);

struct DaopdLoss {
  double value = 0.0;                // (omega/V) * sum of view KLs
  std::vector<double> view_kl;       // raw per-view KL
  std::vector<Tensor> dlogits;       // per view, scaled by omega/V and T^2
};

DaopdLoss daopd_loss(const std::vector<Tensor>& student_logits,
                     const std::vector<Tensor>& teacher_logits,
                     double temperature, double opd_weight);

// R = -view_kl - lambda * ||a||^2.
double reward(double view_kl, std::span<const double> a, double strength_penalty);

// One metrics row produced by an adaptation step.
struct StepOutcome {
  Tensor clean_logits;   // student output on clean x, recorded before the update
  Tensor features;       // pre-classifier features on clean x (pre-update)
  double loss_cons = 0.0;
  double loss_daopd = 0.0;
  double reward_value = 0.0;
  double baseline = 0.0;
  std::vector<double> phi_mean;  // mean routing weight per expert, empty if adapter off
  std::vector<double> strength;  // sampled a (empty when no views were built)
};

// Owns the student optimizer, policy and reward baseline for one episode
// and executes the evaluate -> student -> policy -> teacher -> restore
// schedule on each batch.
class DaopdEngine {
 public:
  DaopdEngine(ModelPair pair, DaopdConfig config, PolicyConfig policy_config,
              ModelOptions options, double student_lr, double policy_lr, Rng policy_rng);

  // Runs one adaptation step on an unlabeled batch. Throws NumericError
  // with a state dump if a loss goes non-finite.
  StepOutcome step(const Tensor& batch, Rng& rng);

  // Prediction without adaptation (source-frozen evaluation).
  StepOutcome evaluate_only(const Tensor& batch) const;

  const ModelPair& pair() const { return pair_; }
  ModelPair& pair() { return pair_; }
  const PolicyParams& policy() const { return policy_; }
  const RewardBaseline& baseline() const { return baseline_; }
  const ModelOptions& options() const { return options_; }
  const DaopdConfig& config() const { return config_; }

 private:
  ModelPair pair_;
  DaopdConfig config_;
  PolicyConfig policy_config_;
  ModelOptions options_;
  AdamOptimizer student_opt_;
  PolicyParams policy_;
  FlatAdam policy_opt_;
  RewardBaseline baseline_;
};

}  // namespace moase
