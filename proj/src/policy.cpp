#include "moase/policy.hpp"

#include <algorithm>
#include <cmath>

namespace moase {

namespace {

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

}  // namespace

void PolicyConfig::validate() const {
  if (families == 0) throw ConfigError("policy.families must be positive");
  if (strength_scales.size() != families) {
    throw ConfigError("policy.strength_scales must have one entry per family");
  }
  for (double s : strength_scales) {
    if (!(s >= 0.0)) throw ConfigError("policy.strength_scales entries must be nonnegative");
  }
  if (!(sigma_min > 0.0)) throw ConfigError("policy.sigma_min must be positive");
  if (!(data_min < data_max)) throw ConfigError("policy data range must be ordered");
  if (!(lr > 0.0)) throw ConfigError("policy.lr must be positive");
}

void PolicyParams::zero_grad() {
  mu_head.zero_grad();
  std::fill(sigma_raw_grad.begin(), sigma_raw_grad.end(), 0.0);
}

PolicyParams make_policy(std::size_t families, Rng& rng) {
  if (families == 0) throw std::invalid_argument("make_policy: need at least one family");
  PolicyParams params;
  params.mu_head = AffineMap(families, 2);
  params.mu_head.init_normal(rng, 0.1);
  params.sigma_raw.assign(families, -1.5);  // sigma starts near 0.25
  params.sigma_raw_grad.assign(families, 0.0);
  return params;
}

PolicyState state_stats(const Tensor& probs) {
  if (probs.rank() != 2) throw std::invalid_argument("state_stats: rank-2 input expected");
  const std::size_t batch = probs.extent(0);
  const std::size_t classes = probs.extent(1);
  if (batch == 0) throw std::invalid_argument("state_stats: empty batch");

  long double entropy_sum = 0.0L;
  long double confidence_sum = 0.0L;
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = probs.row(b);
    long double h = 0.0L;
    double best = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = row[c];
      if (p > 0.0) h -= static_cast<long double>(p) * std::log(p);
      best = std::max(best, p);
    }
    entropy_sum += h;
    confidence_sum += best;
  }
  PolicyState state;
  state.batch_entropy = static_cast<double>(entropy_sum / batch);
  state.mean_confidence = static_cast<double>(confidence_sum / batch);
  return state;
}

std::vector<double> policy_mean(const PolicyParams& params, const PolicyState& state) {
  const double input[2] = {state.batch_entropy, state.mean_confidence};
  auto pre = params.mu_head.forward(std::span<const double>(input, 2));
  for (double& v : pre) v = std::tanh(v);
  return pre;
}

std::vector<double> policy_sigma(const PolicyParams& params, double sigma_min) {
  std::vector<double> sigma(params.sigma_raw.size());
  for (std::size_t j = 0; j < sigma.size(); ++j) {
    sigma[j] = sigma_min + softplus(params.sigma_raw[j]);
  }
  return sigma;
}

StrengthVector policy_sample(const PolicyState& state, const PolicyParams& params,
                             double sigma_min, Rng& rng) {
  const auto mean = policy_mean(params, state);
  const auto sigma = policy_sigma(params, sigma_min);

  StrengthVector out;
  out.a.resize(mean.size());
  long double log_prob = 0.0L;
  long double entropy = 0.0L;
  for (std::size_t j = 0; j < mean.size(); ++j) {
    const double z = rng.normal();
    out.a[j] = mean[j] + sigma[j] * z;
    log_prob += -kHalfLog2Pi - std::log(sigma[j]) - 0.5 * z * z;
    entropy += kHalfLog2Pi + 0.5 + std::log(sigma[j]);
  }
  out.log_prob = static_cast<double>(log_prob);
  out.entropy = static_cast<double>(entropy);
  return out;
}

double policy_log_prob(const PolicyParams& params, const PolicyState& state,
                       std::span<const double> a, double sigma_min) {
  const auto mean = policy_mean(params, state);
  const auto sigma = policy_sigma(params, sigma_min);
  if (a.size() != mean.size()) throw std::invalid_argument("policy_log_prob: size mismatch");
  long double log_prob = 0.0L;
  for (std::size_t j = 0; j < mean.size(); ++j) {
    const double d = (a[j] - mean[j]) / sigma[j];
    log_prob += -kHalfLog2Pi - std::log(sigma[j]) - 0.5 * d * d;
  }
  return static_cast<double>(log_prob);
}

double policy_objective(double log_prob, double reward_value, double baseline,
                        double entropy, double beta) {
  return (reward_value - baseline) * log_prob + beta * entropy;
}

void policy_objective_backward(PolicyParams& params, const PolicyState& state,
                               const StrengthVector& sample, double advantage,
                               double beta, double sigma_min) {
  const double input[2] = {state.batch_entropy, state.mean_confidence};
  const auto pre = params.mu_head.forward(std::span<const double>(input, 2));
  const auto sigma = policy_sigma(params, sigma_min);

  std::vector<double> dpre(pre.size());
  for (std::size_t j = 0; j < pre.size(); ++j) {
    const double mu = std::tanh(pre[j]);
    const double diff = sample.a[j] - mu;
    const double dlogp_dmu = diff / (sigma[j] * sigma[j]);
    const double dJ_dpre = advantage * dlogp_dmu * (1.0 - mu * mu);
    dpre[j] = -dJ_dpre;  // minimize -J

    const double dlogp_dsigma = diff * diff / (sigma[j] * sigma[j] * sigma[j]) - 1.0 / sigma[j];
    const double dH_dsigma = 1.0 / sigma[j];
    const double dJ_draw = (advantage * dlogp_dsigma + beta * dH_dsigma) * sigmoid(params.sigma_raw[j]);
    params.sigma_raw_grad[j] += -dJ_draw;
  }
  params.mu_head.backward(std::span<const double>(input, 2), dpre, std::span<double>());
}

FlatAdam::FlatAdam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void FlatAdam::step(std::span<double> values, std::span<const double> grads) {
  if (values.size() != grads.size()) throw std::invalid_argument("FlatAdam: size mismatch");
  if (m_.empty()) {
    m_.assign(values.size(), 0.0);
    v_.assign(values.size(), 0.0);
  }
  if (m_.size() != values.size()) throw std::invalid_argument("FlatAdam: parameter count changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < values.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    values[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
  }
}

void policy_adam_step(PolicyParams& params, FlatAdam& optimizer) {
  std::vector<double> values;
  values.insert(values.end(), params.mu_head.weight().begin(), params.mu_head.weight().end());
  values.insert(values.end(), params.mu_head.bias().begin(), params.mu_head.bias().end());
  values.insert(values.end(), params.sigma_raw.begin(), params.sigma_raw.end());

  std::vector<double> grads;
  grads.insert(grads.end(), params.mu_head.weight_grad().begin(), params.mu_head.weight_grad().end());
  grads.insert(grads.end(), params.mu_head.bias_grad().begin(), params.mu_head.bias_grad().end());
  grads.insert(grads.end(), params.sigma_raw_grad.begin(), params.sigma_raw_grad.end());

  optimizer.step(values, grads);

  std::size_t pos = 0;
  std::copy_n(values.begin(), params.mu_head.weight().size(), params.mu_head.weight().begin());
  pos += params.mu_head.weight().size();
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), params.mu_head.bias().size(),
              params.mu_head.bias().begin());
  pos += params.mu_head.bias().size();
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), params.sigma_raw.size(),
              params.sigma_raw.begin());
  params.zero_grad();
}

void apply_gauss_noise(Tensor& batch, double sigma, Rng& rng) {
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] += sigma * rng.normal();
}

void apply_smooth(Tensor& batch, double mix) {
  if (mix == 0.0) return;
  const std::size_t rows = batch.extent(0);
  const std::size_t dim = batch.extent(1);
  std::vector<double> smoothed(dim);
  for (std::size_t b = 0; b < rows; ++b) {
    auto row = batch.row(b);
    for (std::size_t i = 0; i < dim; ++i) {
      const std::size_t lo = (i == 0) ? 0 : i - 1;
      const std::size_t hi = (i + 1 < dim) ? i + 1 : i;
      smoothed[i] = (row[lo] + row[i] + row[hi]) / 3.0;
    }
    for (std::size_t i = 0; i < dim; ++i) row[i] = (1.0 - mix) * row[i] + mix * smoothed[i];
  }
}

void apply_contrast(Tensor& batch, double factor) {
  if (factor == 1.0) return;
  const std::size_t rows = batch.extent(0);
  const std::size_t dim = batch.extent(1);
  for (std::size_t b = 0; b < rows; ++b) {
    auto row = batch.row(b);
    long double mean = 0.0L;
    for (double v : row) mean += v;
    const double m = static_cast<double>(mean / dim);
    for (double& v : row) v += (factor - 1.0) * (v - m);
  }
}

void apply_brightness(Tensor& batch, double shift) {
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] += shift;
}

void apply_occlude(Tensor& batch, double fraction, Rng& rng) {
  const std::size_t rows = batch.extent(0);
  const std::size_t dim = batch.extent(1);
  const auto len = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(dim) + 1e-9));
  if (len == 0) return;
  for (std::size_t b = 0; b < rows; ++b) {
    const std::size_t start = rng.uniform_index(dim - len + 1);
    auto row = batch.row(b);
    for (std::size_t i = start; i < start + len; ++i) row[i] = 0.0;
  }
}

void clamp_to_range(Tensor& batch, double lo, double hi) {
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = std::clamp(batch[i], lo, hi);
}

Tensor param_augment(const Tensor& batch, const StrengthVector& strength,
                     const PolicyConfig& config, Rng& rng) {
  if (batch.rank() != 2) throw std::invalid_argument("param_augment: rank-2 batch expected");
  if (strength.a.size() != config.families || config.families != 5) {
    throw std::invalid_argument("param_augment: expected five strength entries");
  }
  batch.check_finite("param_augment input");
  const auto& s = config.strength_scales;
  Tensor out = batch;
  apply_gauss_noise(out, s[0] * std::abs(strength.a[0]), rng);
  apply_smooth(out, std::min(1.0, s[1] * std::abs(strength.a[1])));
  apply_contrast(out, 1.0 + s[2] * strength.a[2]);
  apply_brightness(out, s[3] * strength.a[3]);
  apply_occlude(out, std::min(1.0, s[4] * std::abs(strength.a[4])), rng);
  clamp_to_range(out, config.data_min, config.data_max);
  return out;
}

}  // namespace moase
