#pragma once

// Small classification backbone hosting the MoASE adapter: token embedder,
// one residual block whose linear layer runs in parallel with the adapter,
// mean pool and classifier head. Instantiated twice as student and teacher
// with a frozen source snapshot for stochastic weight restoration.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moase/gating.hpp"
#include "moase/numeric.hpp"
#include "moase/sdd.hpp"

namespace moase {

struct BackboneConfig {
  std::size_t input_dim = 16;
  std::size_t tokens = 8;
  std::size_t channels = 16;
  std::size_t classes = 4;
  std::size_t experts = 4;            // even
  std::size_t hidden_size = 16;       // bottleneck rank baseline
  std::size_t agnostic_experts = 2;   // KeepHigh count; rest KeepLow
  GatingConfig gating;

  void validate() const;
};

struct Params {
  AffineMap embed;         // input_dim -> tokens*channels
  AffineMap block_linear;  // channels -> channels, token-wise
  std::vector<ExpertSpec> experts;
  GatingHeads heads;
  AffineMap classifier;    // channels -> classes
  GatingConfig gating;     // non-learnable adapter settings

  void for_each_map(const std::function<void(const std::string&, AffineMap&)>& fn);
  void for_each_map(const std::function<void(const std::string&, const AffineMap&)>& fn) const;
  void zero_grad();
  std::size_t scalar_count() const;
};

std::vector<double> flatten_params(const Params& params);
void unflatten_params(Params& params, std::span<const double> values);
std::vector<double> flatten_grads(const Params& params);
std::uint64_t hash_params(const Params& params);

struct ModelOptions {
  bool adapter_enabled = true;
  // Train-mode stochasticity for the student's learning passes; evaluation
  // and teacher forwards run with 0.
  double dropout = 0.0;
};

struct ForwardTrace {
  Tensor input;        // [B x input_dim]
  Tensor embedded;     // [B x N x D], train-mode dropout already applied
  std::vector<std::uint8_t> dropout_mask;  // empty when dropout was off
  double dropout_scale = 1.0;
  MoaseTrace moase;    // only populated when the adapter runs
  bool adapter_ran = false;
  Tensor pre_activation;   // v = block(F) (+ adapter)
  Tensor block_out;        // gelu(v)
  Tensor residual;         // F + block_out
  Tensor pooled;           // [B x D] pre-classifier feature
  Tensor logits;           // [B x C]
};

struct ForwardResult {
  Tensor logits;    // [B x C]
  Tensor features;  // [B x D]
};

ForwardResult model_forward(const Params& params, const Tensor& input,
                            const ModelOptions& options, ForwardTrace* trace = nullptr,
                            Rng* rng = nullptr);

// Accumulates parameter gradients from d(loss)/d(logits).
void model_backward(Params& params, const ForwardTrace& trace, const Tensor& dlogits);

struct ModelPair {
  BackboneConfig config;
  Params student;
  Params teacher;    // EMA copy, never accumulates gradients
  Params snapshot;   // frozen source parameters
  std::uint64_t step = 0;
};

ModelPair build_model(const BackboneConfig& config, Rng& rng);

// Teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
void ema_update(ModelPair& pair, double alpha);

// Each scalar independently resets to its snapshot value with probability
// `rate`. Returns the number of restored scalars.
std::size_t restore_stochastic(Params& student, const Params& snapshot, double rate, Rng& rng);

// Adam with the gradient accumulators zeroed after each step.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.99,
                         double eps = 1e-8);

  void step(Params& params);
  void reset();

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::uint64_t t_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

// Plain-text checkpoint, one map per record, hexfloat values so the
// round-trip is bit-exact.
void save_checkpoint(const Params& params, const std::string& path);
void load_checkpoint(Params& params, const std::string& path);

}  // namespace moase
