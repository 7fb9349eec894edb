#pragma once

// Augmentation-strength policy: state summary, diagonal-Gaussian sampling
// with score-function gradients, and the parameterized augmenter. The
// perturbation kernels here are shared with the stream corruptor so
// train-time and stream-time perturbations stay commensurable.

#include <cstddef>
#include <vector>

#include "moase/numeric.hpp"

namespace moase {

struct PolicyState {
  double batch_entropy = 0.0;    // mean per-sample entropy, nats
  double mean_confidence = 0.0;  // mean max-probability
};

// Sampled strength vector with its exact log-density and entropy.
struct StrengthVector {
  std::vector<double> a;
  double log_prob = 0.0;
  double entropy = 0.0;
};

struct PolicyConfig {
  std::size_t families = 5;  // noise, smooth, contrast, brightness, occlude
  double sigma_min = 0.05;
  // Per-family max scales: noise sigma, smoothing mix, contrast delta,
  // brightness shift, occluded fraction.
  std::vector<double> strength_scales = {1.0, 0.8, 0.5, 1.5, 0.5};
  double data_min = -32.0;
  double data_max = 32.0;
  double lr = 1e-3;

  void validate() const;
};

// Gaussian policy: mean = tanh(mu_head(s)), per-dimension stddev
// sigma = sigma_min + softplus(sigma_raw).
struct PolicyParams {
  AffineMap mu_head;  // 2 (entropy, confidence) -> families
  std::vector<double> sigma_raw;
  std::vector<double> sigma_raw_grad;

  std::size_t families() const { return sigma_raw.size(); }
  void zero_grad();
};

PolicyParams make_policy(std::size_t families, Rng& rng);

PolicyState state_stats(const Tensor& probs);

std::vector<double> policy_mean(const PolicyParams& params, const PolicyState& state);
std::vector<double> policy_sigma(const PolicyParams& params, double sigma_min);

StrengthVector policy_sample(const PolicyState& state, const PolicyParams& params,
                             double sigma_min, Rng& rng);

// Exact log-density of `a` under the current policy at `state`.
double policy_log_prob(const PolicyParams& params, const PolicyState& state,
                       std::span<const double> a, double sigma_min);

// J = advantage * log_prob + beta * entropy (to maximize).
double policy_objective(double log_prob, double reward_value, double baseline,
                        double entropy, double beta);

// Accumulates d(-J)/d(params) so a minimizing optimizer ascends J.
void policy_objective_backward(PolicyParams& params, const PolicyState& state,
                               const StrengthVector& sample, double advantage,
                               double beta, double sigma_min);

// Adam over a flat parameter vector; used for the policy parameters.
class FlatAdam {
 public:
  explicit FlatAdam(double lr, double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8);
  void step(std::span<double> values, std::span<const double> grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

void policy_adam_step(PolicyParams& params, FlatAdam& optimizer);

// Perturbation kernels. Each is the identity at zero magnitude.
void apply_gauss_noise(Tensor& batch, double sigma, Rng& rng);
void apply_smooth(Tensor& batch, double mix);
void apply_contrast(Tensor& batch, double factor);
void apply_brightness(Tensor& batch, double shift);
void apply_occlude(Tensor& batch, double fraction, Rng& rng);
void clamp_to_range(Tensor& batch, double lo, double hi);

// Applies noise, smoothing, contrast, brightness and occlusion in that
// fixed order at strengths |a_j| * scale_j (contrast and brightness keep
// the sign of a_j), then clamps to the data range.
Tensor param_augment(const Tensor& batch, const StrengthVector& strength,
                     const PolicyConfig& config, Rng& rng);

}  // namespace moase
