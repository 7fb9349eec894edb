#include "moase/sdd.hpp"

#include <algorithm>
#include <cmath>

namespace moase {

std::size_t budget_from_ratio(std::size_t tokens, double keep_ratio) {
  if (tokens == 0) throw std::invalid_argument("budget_from_ratio: no tokens");
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0) {
    throw std::invalid_argument("budget_from_ratio: keep ratio outside (0,1]");
  }
  const double raw = static_cast<double>(tokens) * keep_ratio + 1e-9;
  auto k = static_cast<std::size_t>(std::floor(raw));
  return std::clamp<std::size_t>(k, 1, tokens);
}

Tensor token_scores(const Tensor& features, ScoreReducer reducer) {
  if (features.rank() != 3) throw std::invalid_argument("token_scores: rank-3 tensor expected");
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  const std::size_t channels = features.extent(2);
  if (channels == 0) throw std::invalid_argument("token_scores: empty channel dimension");

  Tensor scores({batch, tokens});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      auto v = features.token(b, n);
      long double acc = 0.0L;
      if (reducer == ScoreReducer::L2Norm) {
        for (double x : v) acc += static_cast<long double>(x) * x;
        scores.at(b, n) = std::sqrt(static_cast<double>(acc));
      } else {
        for (double x : v) acc += std::abs(x);
        scores.at(b, n) = static_cast<double>(acc) / static_cast<double>(channels);
      }
    }
  }
  return scores;
}

void sdd_mask_row(std::span<const double> scores, std::size_t budget,
                  Polarity polarity, std::span<std::uint8_t> row) {
  const std::size_t n = scores.size();
  if (n == 0) throw std::invalid_argument("sdd_mask_row: no tokens");
  if (budget < 1 || budget > n) throw std::invalid_argument("sdd_mask_row: budget out of range");
  if (row.size() != n) throw std::invalid_argument("sdd_mask_row: row size mismatch");

  const double threshold = kth_order_statistic(scores, budget, polarity);
  std::fill(row.begin(), row.end(), std::uint8_t{0});

  // Strict side first, then fill the remaining budget among threshold ties
  // in increasing token index.
  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool strict = (polarity == Polarity::KeepHigh) ? scores[i] > threshold
                                                         : scores[i] < threshold;
    if (strict) {
      row[i] = 1;
      ++kept;
    }
  }
  for (std::size_t i = 0; i < n && kept < budget; ++i) {
    if (row[i] == 0 && scores[i] == threshold) {
      row[i] = 1;
      ++kept;
    }
  }
}

TokenMask sdd_mask(const Tensor& scores, double keep_ratio, Polarity polarity) {
  if (scores.rank() != 2) throw std::invalid_argument("sdd_mask: rank-2 scores expected");
  const std::size_t batch = scores.extent(0);
  const std::size_t tokens = scores.extent(1);
  const std::size_t budget = budget_from_ratio(tokens, keep_ratio);

  TokenMask mask;
  mask.batch = batch;
  mask.tokens = tokens;
  mask.bits.assign(batch * tokens, 0);
  mask.budgets.assign(batch, budget);
  for (std::size_t b = 0; b < batch; ++b) {
    sdd_mask_row(scores.row(b), budget, polarity,
                 std::span<std::uint8_t>(mask.bits).subspan(b * tokens, tokens));
  }
  return mask;
}

Tensor expert_bottleneck(const Tensor& features, const ExpertSpec& spec, Tensor* mid) {
  if (features.rank() != 3) throw std::invalid_argument("expert_bottleneck: rank-3 tensor expected");
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  const std::size_t channels = features.extent(2);
  if (spec.up.in_dim() != channels || spec.down.out_dim() != channels ||
      spec.up.out_dim() != spec.rank || spec.down.in_dim() != spec.rank) {
    throw std::invalid_argument("expert_bottleneck: rank/shape mismatch");
  }

  Tensor out({batch, tokens, channels});
  if (mid) *mid = Tensor({batch, tokens, spec.rank});
  std::vector<double> hidden(spec.rank);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      spec.up.forward(features.token(b, n), hidden);
      spec.down.forward(hidden, out.token(b, n));
      if (mid) std::copy(hidden.begin(), hidden.end(), mid->token(b, n).begin());
    }
  }
  return out;
}

void expert_bottleneck_backward(const Tensor& features, const Tensor& mid,
                                ExpertSpec& spec, const Tensor& upstream,
                                Tensor* input_grad) {
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  std::vector<double> dhidden(spec.rank);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      std::fill(dhidden.begin(), dhidden.end(), 0.0);
      spec.down.backward(mid.token(b, n), upstream.token(b, n), dhidden);
      spec.up.backward(features.token(b, n), dhidden,
                       input_grad ? input_grad->token(b, n) : std::span<double>());
    }
  }
}

Tensor sparsify(const TokenMask& mask, const Tensor& features) {
  if (features.rank() != 3) throw std::invalid_argument("sparsify: rank-3 tensor expected");
  if (mask.batch != features.extent(0) || mask.tokens != features.extent(1)) {
    throw std::invalid_argument("sparsify: mask shape mismatch");
  }
  Tensor out({features.extent(0), features.extent(1), features.extent(2)});
  for (std::size_t b = 0; b < mask.batch; ++b) {
    for (std::size_t n = 0; n < mask.tokens; ++n) {
      if (mask.bit(b, n)) {
        auto src = features.token(b, n);
        std::copy(src.begin(), src.end(), out.token(b, n).begin());
      }
    }
  }
  return out;
}

void sparsify_backward(const TokenMask& mask, const Tensor& upstream, Tensor& input_grad) {
  if (mask.batch != upstream.extent(0) || mask.tokens != upstream.extent(1)) {
    throw std::invalid_argument("sparsify_backward: mask shape mismatch");
  }
  for (std::size_t b = 0; b < mask.batch; ++b) {
    for (std::size_t n = 0; n < mask.tokens; ++n) {
      if (!mask.bit(b, n)) continue;
      auto src = upstream.token(b, n);
      auto dst = input_grad.token(b, n);
      for (std::size_t d = 0; d < src.size(); ++d) dst[d] += src[d];
    }
  }
}

std::vector<ExpertSpec> make_expert_layout(std::size_t experts, std::size_t agnostic,
                                           std::size_t channels, std::size_t hidden_size,
                                           Rng& rng) {
  if (experts == 0) throw std::invalid_argument("make_expert_layout: need at least one expert");
  if (agnostic > experts) throw std::invalid_argument("make_expert_layout: agnostic count exceeds expert count");
  if (hidden_size == 0) throw std::invalid_argument("make_expert_layout: hidden size must be positive");

  const std::size_t low_rank = std::max<std::size_t>(1, hidden_size / 4);
  std::vector<ExpertSpec> layout;
  layout.reserve(experts);
  for (std::size_t i = 0; i < experts; ++i) {
    ExpertSpec spec;
    spec.id = static_cast<int>(i) + 1;
    spec.polarity = (i < agnostic) ? Polarity::KeepHigh : Polarity::KeepLow;
    const std::size_t within = (i < agnostic) ? i : i - agnostic;
    spec.keep_ratio = (within % 2 == 0) ? 0.5 : 0.25;
    spec.rank = (spec.polarity == Polarity::KeepHigh) ? hidden_size : low_rank;
    spec.up = AffineMap(spec.rank, channels);
    spec.down = AffineMap(channels, spec.rank);
    spec.up.init_zero();
    spec.down.init_kaiming(rng);
    layout.push_back(std::move(spec));
  }
  return layout;
}

}  // namespace moase
