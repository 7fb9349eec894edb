#pragma once

// Deterministic numeric kernel: dense tensors, softmax family, KL,
// order statistics and affine maps with reverse-mode gradients.
// Reductions accumulate in long double in fixed index order so repeated
// runs are bitwise reproducible.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moase {

// Raised when an episode hits a non-finite value; the CLI maps it to exit 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised on malformed configuration; the CLI maps it to exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check_finite(std::span<const double> values, const char* what);

// Dense row-major tensor with an optional same-shape gradient buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // rank-2 / rank-3 element access
  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  std::span<double> row(std::size_t i);             // rank-2 row
  std::span<const double> row(std::size_t i) const;
  std::span<double> token(std::size_t b, std::size_t n);  // rank-3 channel slice
  std::span<const double> token(std::size_t b, std::size_t n) const;

  bool has_grad() const { return grad_.has_value(); }
  void ensure_grad();
  void zero_grad();
  std::span<double> grad();
  std::span<const double> grad() const;

  void check_finite(const char* what) const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

// Counter-seeded RNG. All draw methods are hand-rolled on top of
// mt19937_64 (whose sequence the standard pins down) so that identical
// (seed, stream, call sequence) reproduces identical values on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double normal();                        // N(0,1) via Box-Muller
  bool bernoulli(double p);
  std::size_t uniform_index(std::size_t n);  // unbiased in [0, n)

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::mt19937_64 engine_;
};

enum class Polarity {
  KeepHigh,  // top-K selection, domain-agnostic experts
  KeepLow,   // bottom-K selection, domain-specific experts
};

std::vector<double> softmax(std::span<const double> logits, double temperature);
std::vector<double> log_softmax(std::span<const double> logits, double temperature);

// KL(p || q) in nats; q floored at 1e-12 before the log.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// K-th largest (KeepHigh) or K-th smallest (KeepLow) element, 1-based K.
double kth_order_statistic(std::span<const double> scores, std::size_t k,
                           Polarity polarity);

double gelu(double x);
double gelu_derivative(double x);

// Affine map y = W x + b with gradient accumulators.
class AffineMap {
 public:
  AffineMap() = default;
  AffineMap(std::size_t out_dim, std::size_t in_dim);

  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }

  double& w(std::size_t o, std::size_t i) { return weight_[o * in_dim_ + i]; }
  double w(std::size_t o, std::size_t i) const { return weight_[o * in_dim_ + i]; }

  std::vector<double>& weight() { return weight_; }
  const std::vector<double>& weight() const { return weight_; }
  std::vector<double>& bias() { return bias_; }
  const std::vector<double>& bias() const { return bias_; }
  std::vector<double>& weight_grad() { return weight_grad_; }
  const std::vector<double>& weight_grad() const { return weight_grad_; }
  std::vector<double>& bias_grad() { return bias_grad_; }
  const std::vector<double>& bias_grad() const { return bias_grad_; }

  void init_zero();
  void init_identity();
  void init_normal(Rng& rng, double stddev);
  void init_kaiming(Rng& rng);  // fan-in scaled normal

  void forward(std::span<const double> x, std::span<double> y) const;
  std::vector<double> forward(std::span<const double> x) const;

  // Accumulates weight/bias gradients from (x, dy); if dx is non-empty,
  // accumulates W^T dy into it.
  void backward(std::span<const double> x, std::span<const double> dy,
                std::span<double> dx);

  void zero_grad();
  double max_abs_grad() const;

 private:
  std::size_t out_dim_ = 0;
  std::size_t in_dim_ = 0;
  std::vector<double> weight_;
  std::vector<double> bias_;
  std::vector<double> weight_grad_;
  std::vector<double> bias_grad_;
};

}  // namespace moase
