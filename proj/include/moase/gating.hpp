#pragma once

// Domain-Aware Router, Activation Sparsity Gate and the MoASE aggregation.
// The router is dense: every expert receives probability mass.

#include <cstddef>
#include <vector>

#include "moase/numeric.hpp"
#include "moase/sdd.hpp"

namespace moase {

struct GatingHeads {
  AffineMap dar_head;  // D -> E, fed pooled low-activation features
  AffineMap asg_head;  // D -> E, fed pooled full features
};

struct GatingConfig {
  double eta = 0.1;
  double q_min = 0.05;
  double q_max = 0.95;
  ScoreReducer reducer = ScoreReducer::L2Norm;
};

// Per-sample simplex weights over experts, [B x E].
struct RoutingWeights {
  Tensor phi;
};

// ASG output: clipped keep ratios and integer budgets per (sample, expert).
struct KeepRatioAdjustment {
  Tensor epsilon;     // [B x E], tanh-squashed offsets
  Tensor adjusted_q;  // [B x E]
  std::vector<std::vector<std::size_t>> budgets;  // [B][E]
};

// Everything the forward pass records so the backward pass can replay it.
struct MoaseTrace {
  Tensor scores;        // [B x N]
  TokenMask low_mask;   // DAR bottom-half token mask
  Tensor pooled_low;    // [B x D]
  Tensor dar_logits;    // [B x E]
  Tensor phi;           // [B x E]
  Tensor pooled_full;   // [B x D]
  KeepRatioAdjustment adjust;
  std::vector<Tensor> expert_mid;   // per expert [B x N x r]
  std::vector<Tensor> expert_out;   // per expert bottleneck output
  std::vector<TokenMask> masks;     // per expert token masks
  std::vector<Tensor> sparsified;   // per expert masked output
};

// phi = softmax(dar_head(mean over surviving bottom-half tokens)), T = 1.
RoutingWeights dar_route(const Tensor& features, const GatingHeads& heads,
                         const GatingConfig& config);

// epsilon = tanh(asg_head(mean over all tokens)).
Tensor asg_offsets(const Tensor& features, const GatingHeads& heads);

// q_hat = clip(q + eta * epsilon, q_min, q_max); budget = floor(N * q_hat), >= 1.
KeepRatioAdjustment adjust_keep_ratio(std::span<const double> base_keep,
                                      const Tensor& epsilon, double eta,
                                      double q_min, double q_max,
                                      std::size_t tokens);

// Y(b) = sum_i phi(b,i) * mask_i(b) * bottleneck_i(F(b)); budgets come from
// the ASG-adjusted keep ratios, polarities from each expert.
Tensor moase_forward(const Tensor& features, const std::vector<ExpertSpec>& experts,
                     const GatingHeads& heads, const GatingConfig& config,
                     MoaseTrace* trace = nullptr);

// Accumulates expert/head parameter grads; adds the input gradient into
// `input_grad` when non-null. Selection (masks and budgets) is frozen, so
// the score and ASG paths carry no gradient.
void moase_backward(const Tensor& features, std::vector<ExpertSpec>& experts,
                    GatingHeads& heads, const MoaseTrace& trace,
                    const Tensor& upstream, Tensor* input_grad);

}  // namespace moase
