#include "moase/gating.hpp"

#include <algorithm>
#include <cmath>

namespace moase {

namespace {

// Mean over surviving tokens of a masked [B,N,D] tensor, divisor = budget.
Tensor pool_masked(const Tensor& features, const TokenMask& mask) {
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  const std::size_t channels = features.extent(2);
  Tensor pooled({batch, channels});
  for (std::size_t b = 0; b < batch; ++b) {
    const double inv = 1.0 / static_cast<double>(mask.budgets[b]);
    for (std::size_t n = 0; n < tokens; ++n) {
      if (!mask.bit(b, n)) continue;
      auto v = features.token(b, n);
      for (std::size_t d = 0; d < channels; ++d) pooled.at(b, d) += v[d] * inv;
    }
  }
  return pooled;
}

Tensor pool_all(const Tensor& features) {
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  const std::size_t channels = features.extent(2);
  Tensor pooled({batch, channels});
  const double inv = 1.0 / static_cast<double>(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      auto v = features.token(b, n);
      for (std::size_t d = 0; d < channels; ++d) pooled.at(b, d) += v[d] * inv;
    }
  }
  return pooled;
}

TokenMask bottom_half_mask(const Tensor& scores) {
  const std::size_t batch = scores.extent(0);
  const std::size_t tokens = scores.extent(1);
  const std::size_t k_low = tokens / 2;  // floor(N/2); N >= 2 checked by caller
  TokenMask mask;
  mask.batch = batch;
  mask.tokens = tokens;
  mask.bits.assign(batch * tokens, 0);
  mask.budgets.assign(batch, k_low);
  for (std::size_t b = 0; b < batch; ++b) {
    sdd_mask_row(scores.row(b), k_low, Polarity::KeepLow,
                 std::span<std::uint8_t>(mask.bits).subspan(b * tokens, tokens));
  }
  return mask;
}

void softmax_backward_row(std::span<const double> phi, std::span<const double> dphi,
                          std::span<double> dlogits) {
  long double dot = 0.0L;
  for (std::size_t j = 0; j < phi.size(); ++j) dot += dphi[j] * phi[j];
  for (std::size_t j = 0; j < phi.size(); ++j) {
    dlogits[j] = phi[j] * (dphi[j] - static_cast<double>(dot));
  }
}

}  // namespace

RoutingWeights dar_route(const Tensor& features, const GatingHeads& heads,
                         const GatingConfig& config) {
  if (features.rank() != 3) throw std::invalid_argument("dar_route: rank-3 tensor expected");
  if (features.extent(1) < 2) throw std::invalid_argument("dar_route: need at least two tokens");

  const Tensor scores = token_scores(features, config.reducer);
  const TokenMask low = bottom_half_mask(scores);
  const Tensor low_features = sparsify(low, features);
  const Tensor pooled = pool_masked(low_features, low);

  const std::size_t batch = features.extent(0);
  const std::size_t experts = heads.dar_head.out_dim();
  RoutingWeights routing{Tensor({batch, experts})};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto logits = heads.dar_head.forward(pooled.row(b));
    const auto probs = softmax(logits, 1.0);
    std::copy(probs.begin(), probs.end(), routing.phi.row(b).begin());
  }
  return routing;
}

Tensor asg_offsets(const Tensor& features, const GatingHeads& heads) {
  if (features.rank() != 3) throw std::invalid_argument("asg_offsets: rank-3 tensor expected");
  if (heads.asg_head.in_dim() != features.extent(2)) {
    throw std::invalid_argument("asg_offsets: head input mismatch");
  }
  const Tensor pooled = pool_all(features);
  const std::size_t batch = features.extent(0);
  const std::size_t experts = heads.asg_head.out_dim();
  Tensor eps({batch, experts});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto raw = heads.asg_head.forward(pooled.row(b));
    for (std::size_t i = 0; i < experts; ++i) eps.at(b, i) = std::tanh(raw[i]);
  }
  return eps;
}

KeepRatioAdjustment adjust_keep_ratio(std::span<const double> base_keep,
                                      const Tensor& epsilon, double eta,
                                      double q_min, double q_max,
                                      std::size_t tokens) {
  if (!(q_min > 0.0) || !(q_min < q_max) || q_max > 1.0) {
    throw std::invalid_argument("adjust_keep_ratio: bounds must satisfy 0 < q_min < q_max <= 1");
  }
  if (tokens == 0) throw std::invalid_argument("adjust_keep_ratio: no tokens");
  const std::size_t batch = epsilon.extent(0);
  const std::size_t experts = epsilon.extent(1);
  if (base_keep.size() != experts) {
    throw std::invalid_argument("adjust_keep_ratio: base keep-ratio count mismatch");
  }

  KeepRatioAdjustment adj;
  adj.epsilon = epsilon;
  adj.adjusted_q = Tensor({batch, experts});
  adj.budgets.assign(batch, std::vector<std::size_t>(experts, 0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < experts; ++i) {
      const double q = std::clamp(base_keep[i] + eta * epsilon.at(b, i), q_min, q_max);
      adj.adjusted_q.at(b, i) = q;
      adj.budgets[b][i] = budget_from_ratio(tokens, q);
    }
  }
  return adj;
}

Tensor moase_forward(const Tensor& features, const std::vector<ExpertSpec>& experts,
                     const GatingHeads& heads, const GatingConfig& config,
                     MoaseTrace* trace) {
  if (features.rank() != 3) throw std::invalid_argument("moase_forward: rank-3 tensor expected");
  if (experts.empty()) throw std::invalid_argument("moase_forward: need at least one expert");
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  const std::size_t channels = features.extent(2);
  if (tokens < 2) throw std::invalid_argument("moase_forward: need at least two tokens");

  MoaseTrace local;
  MoaseTrace& t = trace ? *trace : local;

  t.scores = token_scores(features, config.reducer);
  t.low_mask = bottom_half_mask(t.scores);
  t.pooled_low = pool_masked(sparsify(t.low_mask, features), t.low_mask);

  const std::size_t expert_count = experts.size();
  t.dar_logits = Tensor({batch, expert_count});
  t.phi = Tensor({batch, expert_count});
  for (std::size_t b = 0; b < batch; ++b) {
    heads.dar_head.forward(t.pooled_low.row(b), t.dar_logits.row(b));
    const auto probs = softmax(t.dar_logits.row(b), 1.0);
    std::copy(probs.begin(), probs.end(), t.phi.row(b).begin());
  }

  t.pooled_full = pool_all(features);
  Tensor eps({batch, expert_count});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto raw = heads.asg_head.forward(t.pooled_full.row(b));
    for (std::size_t i = 0; i < expert_count; ++i) eps.at(b, i) = std::tanh(raw[i]);
  }
  std::vector<double> base_keep(expert_count);
  for (std::size_t i = 0; i < expert_count; ++i) base_keep[i] = experts[i].keep_ratio;
  t.adjust = adjust_keep_ratio(base_keep, eps, config.eta, config.q_min, config.q_max, tokens);

  t.expert_mid.resize(expert_count);
  t.expert_out.resize(expert_count);
  t.masks.resize(expert_count);
  t.sparsified.resize(expert_count);

  Tensor output({batch, tokens, channels});
  for (std::size_t i = 0; i < expert_count; ++i) {
    t.expert_out[i] = expert_bottleneck(features, experts[i], &t.expert_mid[i]);

    TokenMask mask;
    mask.batch = batch;
    mask.tokens = tokens;
    mask.bits.assign(batch * tokens, 0);
    mask.budgets.resize(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      mask.budgets[b] = t.adjust.budgets[b][i];
      sdd_mask_row(t.scores.row(b), mask.budgets[b], experts[i].polarity,
                   std::span<std::uint8_t>(mask.bits).subspan(b * tokens, tokens));
    }
    t.masks[i] = std::move(mask);
    t.sparsified[i] = sparsify(t.masks[i], t.expert_out[i]);

    for (std::size_t b = 0; b < batch; ++b) {
      const double weight = t.phi.at(b, i);
      for (std::size_t n = 0; n < tokens; ++n) {
        auto src = t.sparsified[i].token(b, n);
        auto dst = output.token(b, n);
        for (std::size_t d = 0; d < channels; ++d) dst[d] += weight * src[d];
      }
    }
  }
  return output;
}

void moase_backward(const Tensor& features, std::vector<ExpertSpec>& experts,
                    GatingHeads& heads, const MoaseTrace& trace,
                    const Tensor& upstream, Tensor* input_grad) {
  const std::size_t batch = features.extent(0);
  const std::size_t tokens = features.extent(1);
  const std::size_t channels = features.extent(2);
  const std::size_t expert_count = experts.size();

  // d phi and per-expert feature grads.
  Tensor dphi({batch, expert_count});
  for (std::size_t i = 0; i < expert_count; ++i) {
    for (std::size_t b = 0; b < batch; ++b) {
      long double acc = 0.0L;
      for (std::size_t n = 0; n < tokens; ++n) {
        auto g = upstream.token(b, n);
        auto s = trace.sparsified[i].token(b, n);
        for (std::size_t d = 0; d < channels; ++d) acc += g[d] * s[d];
      }
      dphi.at(b, i) = static_cast<double>(acc);
    }

    // Straight-through: route phi-weighted upstream through the frozen mask
    // into the bottleneck.
    Tensor dexpert({batch, tokens, channels});
    for (std::size_t b = 0; b < batch; ++b) {
      const double weight = trace.phi.at(b, i);
      for (std::size_t n = 0; n < tokens; ++n) {
        if (!trace.masks[i].bit(b, n)) continue;
        auto g = upstream.token(b, n);
        auto dst = dexpert.token(b, n);
        for (std::size_t d = 0; d < channels; ++d) dst[d] = weight * g[d];
      }
    }
    expert_bottleneck_backward(features, trace.expert_mid[i], experts[i], dexpert, input_grad);
  }

  // Router: softmax + head + masked mean-pool (ASG budgets carry no grad).
  std::vector<double> dlogits(expert_count);
  std::vector<double> dpooled(channels);
  for (std::size_t b = 0; b < batch; ++b) {
    softmax_backward_row(trace.phi.row(b), dphi.row(b), dlogits);
    std::fill(dpooled.begin(), dpooled.end(), 0.0);
    heads.dar_head.backward(trace.pooled_low.row(b), dlogits, dpooled);
    if (input_grad) {
      const double inv = 1.0 / static_cast<double>(trace.low_mask.budgets[b]);
      for (std::size_t n = 0; n < tokens; ++n) {
        if (!trace.low_mask.bit(b, n)) continue;
        auto dst = input_grad->token(b, n);
        for (std::size_t d = 0; d < channels; ++d) dst[d] += inv * dpooled[d];
      }
    }
  }
}

}  // namespace moase
