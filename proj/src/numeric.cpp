#include "moase/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moase {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in ") + what);
    }
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (std::size_t e : shape_) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent");
    n *= e;
  }
  data_.assign(n, fill);
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw std::invalid_argument("Tensor: axis out of range");
  return shape_[axis];
}

double& Tensor::at(std::size_t i, std::size_t j) {
  return data_[i * shape_[1] + j];
}
double Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

std::span<double> Tensor::row(std::size_t i) {
  return std::span<double>(data_).subspan(i * shape_[1], shape_[1]);
}
std::span<const double> Tensor::row(std::size_t i) const {
  return std::span<const double>(data_).subspan(i * shape_[1], shape_[1]);
}
std::span<double> Tensor::token(std::size_t b, std::size_t n) {
  const std::size_t d = shape_[2];
  return std::span<double>(data_).subspan((b * shape_[1] + n) * d, d);
}
std::span<const double> Tensor::token(std::size_t b, std::size_t n) const {
  const std::size_t d = shape_[2];
  return std::span<const double>(data_).subspan((b * shape_[1] + n) * d, d);
}

void Tensor::ensure_grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

std::span<double> Tensor::grad() {
  ensure_grad();
  return *grad_;
}
std::span<const double> Tensor::grad() const {
  if (!grad_) throw std::logic_error("Tensor: grad not allocated");
  return *grad_;
}

void Tensor::check_finite(const char* what) const {
  moase::check_finite(data_, what);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed),
      stream_(stream),
      engine_(splitmix64(seed ^ splitmix64(0xA5A5A5A5ULL + stream))) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller, cosine branch only; u1 in (0,1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

bool Rng::bernoulli(double p) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("bernoulli: p outside [0,1]");
  return uniform() < p;
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<std::size_t>(x % n);
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  check_finite(logits, "softmax input");

  double max_logit = logits[0];
  for (double v : logits) max_logit = std::max(max_logit, v);

  std::vector<double> out(logits.size());
  long double total = 0.0L;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - max_logit) / temperature);
    total += out[i];
  }
  for (double& v : out) v = static_cast<double>(v / total);
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits, double temperature) {
  if (logits.empty()) throw std::invalid_argument("log_softmax: empty input");
  if (!(temperature > 0.0)) throw std::invalid_argument("log_softmax: temperature must be positive");
  check_finite(logits, "log_softmax input");

  double max_logit = logits[0];
  for (double v : logits) max_logit = std::max(max_logit, v);

  long double total = 0.0L;
  std::vector<double> shifted(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    shifted[i] = (logits[i] - max_logit) / temperature;
    total += std::exp(static_cast<long double>(shifted[i]));
  }
  const double log_norm = static_cast<double>(std::log(total));
  for (double& v : shifted) v -= log_norm;
  return shifted;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  long double sum_p = 0.0L, sum_q = 0.0L;
  for (double v : p) sum_p += v;
  for (double v : q) sum_q += v;
  if (std::abs(static_cast<double>(sum_p) - 1.0) > 1e-6 ||
      std::abs(static_cast<double>(sum_q) - 1.0) > 1e-6) {
    throw std::invalid_argument("kl_divergence: inputs not on the simplex");
  }
  long double kl = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;  // 0 log 0 = 0
    const double qf = std::max(q[i], 1e-12);
    kl += static_cast<long double>(p[i]) * (std::log(p[i]) - std::log(qf));
  }
  return std::max(0.0, static_cast<double>(kl));
}

double kth_order_statistic(std::span<const double> scores, std::size_t k,
                           Polarity polarity) {
  const std::size_t n = scores.size();
  if (k < 1 || k > n) throw std::invalid_argument("kth_order_statistic: K out of range");
  std::vector<double> work(scores.begin(), scores.end());
  auto nth = work.begin() + static_cast<std::ptrdiff_t>(k - 1);
  if (polarity == Polarity::KeepHigh) {
    std::nth_element(work.begin(), nth, work.end(), std::greater<double>());
  } else {
    std::nth_element(work.begin(), nth, work.end());
  }
  return *nth;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

AffineMap::AffineMap(std::size_t out_dim, std::size_t in_dim)
    : out_dim_(out_dim),
      in_dim_(in_dim),
      weight_(out_dim * in_dim, 0.0),
      bias_(out_dim, 0.0),
      weight_grad_(out_dim * in_dim, 0.0),
      bias_grad_(out_dim, 0.0) {
  if (out_dim == 0 || in_dim == 0) throw std::invalid_argument("AffineMap: zero extent");
}

void AffineMap::init_zero() {
  std::fill(weight_.begin(), weight_.end(), 0.0);
  std::fill(bias_.begin(), bias_.end(), 0.0);
}

void AffineMap::init_identity() {
  if (out_dim_ != in_dim_) throw std::invalid_argument("init_identity: not square");
  init_zero();
  for (std::size_t i = 0; i < out_dim_; ++i) w(i, i) = 1.0;
}

void AffineMap::init_normal(Rng& rng, double stddev) {
  for (double& v : weight_) v = stddev * rng.normal();
  std::fill(bias_.begin(), bias_.end(), 0.0);
}

void AffineMap::init_kaiming(Rng& rng) {
  init_normal(rng, std::sqrt(2.0 / static_cast<double>(in_dim_)));
}

void AffineMap::forward(std::span<const double> x, std::span<double> y) const {
  if (x.size() != in_dim_ || y.size() != out_dim_) {
    throw std::invalid_argument("AffineMap::forward: shape mismatch");
  }
  for (std::size_t o = 0; o < out_dim_; ++o) {
    long double acc = bias_[o];
    const double* wrow = weight_.data() + o * in_dim_;
    for (std::size_t i = 0; i < in_dim_; ++i) acc += wrow[i] * x[i];
    y[o] = static_cast<double>(acc);
  }
}

std::vector<double> AffineMap::forward(std::span<const double> x) const {
  std::vector<double> y(out_dim_);
  forward(x, y);
  return y;
}

void AffineMap::backward(std::span<const double> x, std::span<const double> dy,
                         std::span<double> dx) {
  if (x.size() != in_dim_ || dy.size() != out_dim_) {
    throw std::invalid_argument("AffineMap::backward: shape mismatch");
  }
  if (!dx.empty() && dx.size() != in_dim_) {
    throw std::invalid_argument("AffineMap::backward: dx shape mismatch");
  }
  for (std::size_t o = 0; o < out_dim_; ++o) {
    const double g = dy[o];
    bias_grad_[o] += g;
    double* grow = weight_grad_.data() + o * in_dim_;
    const double* wrow = weight_.data() + o * in_dim_;
    for (std::size_t i = 0; i < in_dim_; ++i) {
      grow[i] += g * x[i];
      if (!dx.empty()) dx[i] += g * wrow[i];
    }
  }
}

void AffineMap::zero_grad() {
  std::fill(weight_grad_.begin(), weight_grad_.end(), 0.0);
  std::fill(bias_grad_.begin(), bias_grad_.end(), 0.0);
}

double AffineMap::max_abs_grad() const {
  double m = 0.0;
  for (double v : weight_grad_) m = std::max(m, std::abs(v));
  for (double v : bias_grad_) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace moase
