#include "moase/daopd.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moase {

void DaopdConfig::validate() const {
  if (!(ema_alpha >= 0.0) || ema_alpha >= 1.0) throw ConfigError("daopd.ema_alpha must lie in [0,1)");
  if (views < 1) throw ConfigError("daopd.views must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("daopd.temperature must be positive");
  if (opd_weight < 0.0) throw ConfigError("daopd.opd_weight must be nonnegative");
  if (strength_penalty < 0.0) throw ConfigError("daopd.strength_penalty must be nonnegative");
  if (policy_beta < 0.0) throw ConfigError("daopd.policy_beta must be nonnegative");
  if (!(baseline_momentum >= 0.0) || baseline_momentum >= 1.0) {
    throw ConfigError("daopd.baseline_momentum must lie in [0,1)");
  }
  if (restore_rate < 0.0 || restore_rate > 1.0) throw ConfigError("daopd.restore_rate must lie in [0,1]");
  if (student_dropout < 0.0 || student_dropout >= 1.0) {
    throw ConfigError("daopd.student_dropout must lie in [0,1)");
  }
  if (train_input_noise < 0.0) throw ConfigError("daopd.train_input_noise must be nonnegative");
}

void RewardBaseline::update(double reward_value, double momentum) {
  if (!initialized) {
    value = reward_value;
    initialized = true;
  } else {
    value = momentum * value + (1.0 - momentum) * reward_value;
  }
}

LossResult consistency_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw std::invalid_argument("consistency_loss: shape mismatch");
  }
  const std::size_t batch = student_logits.extent(0);
  const std::size_t classes = student_logits.extent(1);

  LossResult result;
  result.dlogits = Tensor({batch, classes});
  long double total = 0.0L;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto p_teacher = softmax(teacher_logits.row(b), 1.0);
    const auto log_p = log_softmax(student_logits.row(b), 1.0);
    const auto p_student = softmax(student_logits.row(b), 1.0);
    long double row = 0.0L;
    for (std::size_t c = 0; c < classes; ++c) row -= p_teacher[c] * log_p[c];
    total += row;
    auto grad = result.dlogits.row(b);
    for (std::size_t c = 0; c < classes; ++c) {
      grad[c] = (p_student[c] - p_teacher[c]) / static_cast<double>(batch);
    }
  }
  result.value = static_cast<double>(total / batch);
  return result;
}

LossResult daopd_view_kl(const Tensor& student_logits, const Tensor& teacher_logits,
                         double temperature) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw std::invalid_argument("daopd_view_kl: shape mismatch");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("daopd_view_kl: temperature must be positive");
  const std::size_t batch = student_logits.extent(0);
  const std::size_t classes = student_logits.extent(1);

  LossResult result;
  result.dlogits = Tensor({batch, classes});
  long double total = 0.0L;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto log_p = log_softmax(student_logits.row(b), temperature);
    const auto log_q = log_softmax(teacher_logits.row(b), temperature);
    long double kl = 0.0L;
    for (std::size_t c = 0; c < classes; ++c) {
      kl += std::exp(log_p[c]) * (log_p[c] - log_q[c]);
    }
    total += kl;
    // d(kl)/dz_c = p_c (log p_c - log q_c - kl) / T, corrected by T^2.
    auto grad = result.dlogits.row(b);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(log_p[c]);
      grad[c] = temperature * p * (log_p[c] - log_q[c] - static_cast<double>(kl)) /
                static_cast<double>(batch);
    }
  }
  result.value = static_cast<double>(total / batch);
  return result;
}

DaopdLoss daopd_loss(const std::vector<Tensor>& student_logits,
                     const std::vector<Tensor>& teacher_logits,
                     double temperature, double opd_weight) {
  if (student_logits.empty()) throw std::invalid_argument("daopd_loss: need at least one view");
  if (student_logits.size() != teacher_logits.size()) {
    throw std::invalid_argument("daopd_loss: view count mismatch");
  }
  const double scale = opd_weight / static_cast<double>(student_logits.size());

  DaopdLoss loss;
  long double total = 0.0L;
  for (std::size_t v = 0; v < student_logits.size(); ++v) {
    LossResult view = daopd_view_kl(student_logits[v], teacher_logits[v], temperature);
    total += view.value;
    loss.view_kl.push_back(view.value);
    for (std::size_t i = 0; i < view.dlogits.size(); ++i) view.dlogits[i] *= scale;
    loss.dlogits.push_back(std::move(view.dlogits));
  }
  loss.value = static_cast<double>(total) * scale;
  return loss;
}

double reward(double view_kl, std::span<const double> a, double strength_penalty) {
  if (!(view_kl >= 0.0)) throw std::invalid_argument("reward: view KL must be nonnegative");
  long double norm2 = 0.0L;
  for (double v : a) norm2 += static_cast<long double>(v) * v;
  return -view_kl - strength_penalty * static_cast<double>(norm2);
}

DaopdEngine::DaopdEngine(ModelPair pair, DaopdConfig config, PolicyConfig policy_config,
                         ModelOptions options, double student_lr, double policy_lr,
                         Rng policy_rng)
    : pair_(std::move(pair)),
      config_(config),
      policy_config_(policy_config),
      options_(options),
      student_opt_(student_lr),
      policy_(make_policy(policy_config.families, policy_rng)),
      policy_opt_(policy_lr) {
  config_.validate();
  policy_config_.validate();
}

StepOutcome DaopdEngine::evaluate_only(const Tensor& batch) const {
  StepOutcome outcome;
  ForwardTrace trace;
  const ForwardResult clean = model_forward(pair_.student, batch, options_, &trace);
  outcome.clean_logits = clean.logits;
  outcome.features = clean.features;
  if (trace.adapter_ran) {
    const std::size_t experts = trace.moase.phi.extent(1);
    outcome.phi_mean.assign(experts, 0.0);
    for (std::size_t b = 0; b < trace.moase.phi.extent(0); ++b) {
      for (std::size_t i = 0; i < experts; ++i) {
        outcome.phi_mean[i] += trace.moase.phi.at(b, i) / static_cast<double>(batch.extent(0));
      }
    }
  }
  outcome.baseline = baseline_.value;
  return outcome;
}

StepOutcome DaopdEngine::step(const Tensor& batch, Rng& rng) {
  if (batch.extent(0) == 0) throw std::invalid_argument("adaptation step: empty batch");
  StepOutcome outcome;

  pair_.student.zero_grad();

  // (1) Evaluation pass: the online prediction is recorded before any
  // update; it also feeds the policy state.
  {
    ForwardTrace eval_trace;
    const ForwardResult eval = model_forward(pair_.student, batch, options_, &eval_trace);
    outcome.clean_logits = eval.logits;
    outcome.features = eval.features;
    if (eval_trace.adapter_ran) {
      const std::size_t experts = eval_trace.moase.phi.extent(1);
      outcome.phi_mean.assign(experts, 0.0);
      for (std::size_t b = 0; b < eval_trace.moase.phi.extent(0); ++b) {
        for (std::size_t i = 0; i < experts; ++i) {
          outcome.phi_mean[i] +=
              eval_trace.moase.phi.at(b, i) / static_cast<double>(batch.extent(0));
        }
      }
    }
  }

  const ForwardResult teacher_clean = model_forward(pair_.teacher, batch, options_, nullptr);

  const bool use_views = config_.opd_weight > 0.0;
  const bool use_policy = use_views && config_.rl_enabled;

  Tensor probs({batch.extent(0), outcome.clean_logits.extent(1)});
  for (std::size_t b = 0; b < batch.extent(0); ++b) {
    const auto row = softmax(outcome.clean_logits.row(b), 1.0);
    std::copy(row.begin(), row.end(), probs.row(b).begin());
  }
  const PolicyState state = state_stats(probs);

  StrengthVector strength;
  std::vector<Tensor> views;
  if (use_views) {
    if (use_policy) {
      strength = policy_sample(state, policy_, policy_config_.sigma_min, rng);
    } else {
      strength.a.assign(policy_config_.families, config_.fixed_strength);
    }
    outcome.strength = strength.a;
    views.reserve(config_.views);
    for (std::size_t v = 0; v < config_.views; ++v) {
      views.push_back(param_augment(batch, strength, policy_config_, rng));
    }
  }

  // (2) Student update: the learning passes run in train mode (dropout on)
  // while the teacher stays in evaluation mode.
  ModelOptions train_options = options_;
  train_options.dropout = config_.student_dropout;

  Tensor train_batch = batch;
  if (config_.train_input_noise > 0.0) {
    apply_gauss_noise(train_batch, config_.train_input_noise, rng);
  }

  ForwardTrace clean_trace;
  const ForwardResult clean =
      model_forward(pair_.student, train_batch, train_options, &clean_trace, &rng);
  const LossResult cons = consistency_loss(clean.logits, teacher_clean.logits);
  outcome.loss_cons = cons.value;
  model_backward(pair_.student, clean_trace, cons.dlogits);

  std::vector<double> view_kls;
  if (use_views) {
    std::vector<Tensor> student_view_logits;
    std::vector<ForwardTrace> view_traces(views.size());
    std::vector<Tensor> teacher_view_logits;
    for (std::size_t v = 0; v < views.size(); ++v) {
      student_view_logits.push_back(
          model_forward(pair_.student, views[v], train_options, &view_traces[v], &rng).logits);
      teacher_view_logits.push_back(model_forward(pair_.teacher, views[v], options_, nullptr).logits);
    }
    const DaopdLoss opd = daopd_loss(student_view_logits, teacher_view_logits,
                                     config_.temperature, config_.opd_weight);
    outcome.loss_daopd = opd.value;
    view_kls = opd.view_kl;
    for (std::size_t v = 0; v < views.size(); ++v) {
      model_backward(pair_.student, view_traces[v], opd.dlogits[v]);
    }
  }

  if (!std::isfinite(outcome.loss_cons) || !std::isfinite(outcome.loss_daopd)) {
    std::ostringstream dump;
    dump << "adaptation step aborted at step " << pair_.step
         << ": loss_cons=" << outcome.loss_cons << " loss_daopd=" << outcome.loss_daopd
         << " student_hash=" << hash_params(pair_.student)
         << " teacher_hash=" << hash_params(pair_.teacher);
    throw NumericError(dump.str());
  }
  student_opt_.step(pair_.student);

  // (3) Policy update with detached reward, then the baseline.
  if (use_policy) {
    long double mean_kl = 0.0L;
    for (double v : view_kls) mean_kl += v;
    mean_kl /= static_cast<double>(view_kls.size());
    outcome.reward_value = reward(static_cast<double>(mean_kl), strength.a, config_.strength_penalty);
    const double advantage = baseline_.initialized ? outcome.reward_value - baseline_.value : 0.0;
    policy_objective_backward(policy_, state, strength, advantage, config_.policy_beta,
                              policy_config_.sigma_min);
    policy_adam_step(policy_, policy_opt_);
    baseline_.update(outcome.reward_value, config_.baseline_momentum);
  }
  outcome.baseline = baseline_.value;

  // (4) Teacher EMA, (5) stochastic restoration.
  ema_update(pair_, config_.ema_alpha);
  restore_stochastic(pair_.student, pair_.snapshot, config_.restore_rate, rng);
  ++pair_.step;
  return outcome;
}

}  // namespace moase
