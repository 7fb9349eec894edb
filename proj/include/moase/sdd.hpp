#pragma once

// Spatial Differentiable Dropout: token activation scores, Top-/Bottom-K
// binary masks with straight-through gradients, and rank-parameterized
// expert bottlenecks.

#include <cstddef>
#include <vector>

#include "moase/numeric.hpp"

namespace moase {

enum class ScoreReducer {
  L2Norm,
  MeanAbs,
};

// One activation-sparsity expert: polarity picks Top-K (KeepHigh) or
// Bottom-K (KeepLow) tokens, keep_ratio sets the base token budget and
// rank sets the bottleneck capacity.
struct ExpertSpec {
  int id = 0;
  Polarity polarity = Polarity::KeepHigh;
  double keep_ratio = 0.5;  // in (0,1)
  std::size_t rank = 1;
  AffineMap up;    // D -> rank
  AffineMap down;  // rank -> D
};

// Binary token mask [B x N] with its per-sample budget.
struct TokenMask {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::vector<std::uint8_t> bits;     // B * N
  std::vector<std::size_t> budgets;   // B

  std::uint8_t bit(std::size_t b, std::size_t n) const { return bits[b * tokens + n]; }
};

// Token budget for a keep ratio: floor(N*q) clamped to [1, N]. The tiny
// epsilon compensates for binary floating point so ratios like 0.6 on
// N=10 floor to 6 as they would in exact arithmetic.
std::size_t budget_from_ratio(std::size_t tokens, double keep_ratio);

// s(b,n) = R(F[b,n,:]) reducing over channels. F is [B,N,D].
Tensor token_scores(const Tensor& features, ScoreReducer reducer);

// Fills one mask row: keeps exactly `budget` tokens by score and polarity.
// Ties at the threshold keep the lower token index.
void sdd_mask_row(std::span<const double> scores, std::size_t budget,
                  Polarity polarity, std::span<std::uint8_t> row);

// Uniform-budget mask over a [B x N] score matrix, K = budget_from_ratio(N, q).
TokenMask sdd_mask(const Tensor& scores, double keep_ratio, Polarity polarity);

// Token-wise rank bottleneck f(F)[b,n,:] = down(up(F[b,n,:])).
// `mid` receives the up-projection outputs [B,N,rank] for the backward pass.
Tensor expert_bottleneck(const Tensor& features, const ExpertSpec& spec, Tensor* mid = nullptr);

// Accumulates bottleneck parameter grads and, if non-null, input grads.
void expert_bottleneck_backward(const Tensor& features, const Tensor& mid,
                                ExpertSpec& spec, const Tensor& upstream,
                                Tensor* input_grad);

// F_tilde = mask (broadcast over channels) * features. Straight-through:
// the backward multiplies upstream grads by the same frozen mask.
Tensor sparsify(const TokenMask& mask, const Tensor& features);

void sparsify_backward(const TokenMask& mask, const Tensor& upstream, Tensor& input_grad);

// Default expert layout: `agnostic` KeepHigh experts at the full bottleneck
// rank, the rest KeepLow at quarter rank; keep ratios cycle {0.5, 0.25}
// within each polarity group. Down maps get Kaiming init, up maps start at
// zero so the adapter initially contributes nothing.
std::vector<ExpertSpec> make_expert_layout(std::size_t experts, std::size_t agnostic,
                                           std::size_t channels, std::size_t hidden_size,
                                           Rng& rng);

}  // namespace moase
