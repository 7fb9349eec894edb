#include "moase/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace moase {

void BackboneConfig::validate() const {
  if (input_dim == 0 || tokens == 0 || channels == 0 || classes == 0 || hidden_size == 0) {
    throw std::invalid_argument("BackboneConfig: all extents must be positive");
  }
  if (experts == 0 || experts % 2 != 0) {
    throw std::invalid_argument("BackboneConfig: expert count must be a positive even integer");
  }
  if (agnostic_experts > experts) {
    throw std::invalid_argument("BackboneConfig: agnostic expert count exceeds expert count");
  }
  if (tokens < 2) {
    throw std::invalid_argument("BackboneConfig: router needs at least two tokens");
  }
}

void Params::for_each_map(const std::function<void(const std::string&, AffineMap&)>& fn) {
  fn("embed", embed);
  fn("block", block_linear);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    fn("expert" + std::to_string(i) + ".up", experts[i].up);
    fn("expert" + std::to_string(i) + ".down", experts[i].down);
  }
  fn("dar", heads.dar_head);
  fn("asg", heads.asg_head);
  fn("cls", classifier);
}

void Params::for_each_map(const std::function<void(const std::string&, const AffineMap&)>& fn) const {
  const_cast<Params*>(this)->for_each_map(
      [&fn](const std::string& name, AffineMap& map) { fn(name, map); });
}

void Params::zero_grad() {
  for_each_map([](const std::string&, AffineMap& map) { map.zero_grad(); });
}

std::size_t Params::scalar_count() const {
  std::size_t n = 0;
  for_each_map([&n](const std::string&, const AffineMap& map) {
    n += map.weight().size() + map.bias().size();
  });
  return n;
}

std::vector<double> flatten_params(const Params& params) {
  std::vector<double> out;
  out.reserve(params.scalar_count());
  params.for_each_map([&out](const std::string&, const AffineMap& map) {
    out.insert(out.end(), map.weight().begin(), map.weight().end());
    out.insert(out.end(), map.bias().begin(), map.bias().end());
  });
  return out;
}

void unflatten_params(Params& params, std::span<const double> values) {
  std::size_t pos = 0;
  params.for_each_map([&](const std::string&, AffineMap& map) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), map.weight().size(),
                map.weight().begin());
    pos += map.weight().size();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), map.bias().size(),
                map.bias().begin());
    pos += map.bias().size();
  });
  if (pos != values.size()) throw std::invalid_argument("unflatten_params: size mismatch");
}

std::vector<double> flatten_grads(const Params& params) {
  std::vector<double> out;
  out.reserve(params.scalar_count());
  params.for_each_map([&out](const std::string&, const AffineMap& map) {
    out.insert(out.end(), map.weight_grad().begin(), map.weight_grad().end());
    out.insert(out.end(), map.bias_grad().begin(), map.bias_grad().end());
  });
  return out;
}

std::uint64_t hash_params(const Params& params) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  auto mix = [&h](const std::vector<double>& values) {
    for (double v : values) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xFFULL;
        h *= 1099511628211ULL;
      }
    }
  };
  params.for_each_map([&](const std::string&, const AffineMap& map) {
    mix(map.weight());
    mix(map.bias());
  });
  return h;
}

ForwardResult model_forward(const Params& params, const Tensor& input,
                            const ModelOptions& options, ForwardTrace* trace, Rng* rng) {
  if (options.dropout < 0.0 || options.dropout >= 1.0) {
    throw std::invalid_argument("model_forward: dropout must lie in [0,1)");
  }
  if (options.dropout > 0.0 && rng == nullptr) {
    throw std::invalid_argument("model_forward: dropout requires an rng");
  }
  if (input.rank() != 2) throw std::invalid_argument("model_forward: rank-2 input expected");
  const std::size_t batch = input.extent(0);
  if (batch == 0) throw std::invalid_argument("model_forward: empty batch");
  if (input.extent(1) != params.embed.in_dim()) {
    throw std::invalid_argument("model_forward: input dimension mismatch");
  }

  const std::size_t embed_out = params.embed.out_dim();
  const std::size_t channels = params.block_linear.in_dim();
  const std::size_t tokens = embed_out / channels;
  const std::size_t classes = params.classifier.out_dim();

  ForwardTrace local;
  ForwardTrace& t = trace ? *trace : local;
  t.input = input;
  t.embedded = Tensor({batch, tokens, channels});
  for (std::size_t b = 0; b < batch; ++b) {
    params.embed.forward(input.row(b),
                         std::span<double>(t.embedded.data()).subspan(b * embed_out, embed_out));
  }
  if (options.dropout > 0.0) {
    t.dropout_mask.resize(t.embedded.size());
    t.dropout_scale = 1.0 / (1.0 - options.dropout);
    for (std::size_t i = 0; i < t.embedded.size(); ++i) {
      t.dropout_mask[i] = rng->bernoulli(options.dropout) ? 0 : 1;
      t.embedded[i] = t.dropout_mask[i] ? t.embedded[i] * t.dropout_scale : 0.0;
    }
  } else {
    t.dropout_mask.clear();
    t.dropout_scale = 1.0;
  }

  t.pre_activation = Tensor({batch, tokens, channels});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      params.block_linear.forward(t.embedded.token(b, n), t.pre_activation.token(b, n));
    }
  }

  t.adapter_ran = options.adapter_enabled && !params.experts.empty();
  if (t.adapter_ran) {
    const Tensor adapter =
        moase_forward(t.embedded, params.experts, params.heads, params.gating, &t.moase);
    for (std::size_t i = 0; i < adapter.size(); ++i) t.pre_activation[i] += adapter[i];
  }

  t.block_out = Tensor({batch, tokens, channels});
  t.residual = Tensor({batch, tokens, channels});
  for (std::size_t i = 0; i < t.pre_activation.size(); ++i) {
    t.block_out[i] = gelu(t.pre_activation[i]);
    t.residual[i] = t.embedded[i] + t.block_out[i];
  }

  t.pooled = Tensor({batch, channels});
  const double inv_tokens = 1.0 / static_cast<double>(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      auto v = t.residual.token(b, n);
      for (std::size_t d = 0; d < channels; ++d) t.pooled.at(b, d) += v[d] * inv_tokens;
    }
  }

  t.logits = Tensor({batch, classes});
  for (std::size_t b = 0; b < batch; ++b) {
    params.classifier.forward(t.pooled.row(b), t.logits.row(b));
  }
  t.logits.check_finite("model logits");

  return ForwardResult{t.logits, t.pooled};
}

void model_backward(Params& params, const ForwardTrace& trace, const Tensor& dlogits) {
  const std::size_t batch = trace.input.extent(0);
  const std::size_t tokens = trace.embedded.extent(1);
  const std::size_t channels = trace.embedded.extent(2);
  const std::size_t embed_out = tokens * channels;

  Tensor dpooled({batch, channels});
  for (std::size_t b = 0; b < batch; ++b) {
    params.classifier.backward(trace.pooled.row(b), dlogits.row(b), dpooled.row(b));
  }

  // Pool -> residual, then split residual into skip path and gelu path.
  Tensor dresidual({batch, tokens, channels});
  const double inv_tokens = 1.0 / static_cast<double>(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      auto dst = dresidual.token(b, n);
      auto src = dpooled.row(b);
      for (std::size_t d = 0; d < channels; ++d) dst[d] = src[d] * inv_tokens;
    }
  }

  Tensor dembedded({batch, tokens, channels});
  Tensor dpre({batch, tokens, channels});
  for (std::size_t i = 0; i < dresidual.size(); ++i) {
    dembedded[i] = dresidual[i];  // skip connection
    dpre[i] = dresidual[i] * gelu_derivative(trace.pre_activation[i]);
  }

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < tokens; ++n) {
      params.block_linear.backward(trace.embedded.token(b, n), dpre.token(b, n),
                                   dembedded.token(b, n));
    }
  }

  if (trace.adapter_ran) {
    moase_backward(trace.embedded, params.experts, params.heads, trace.moase, dpre, &dembedded);
  }

  if (!trace.dropout_mask.empty()) {
    for (std::size_t i = 0; i < dembedded.size(); ++i) {
      dembedded[i] = trace.dropout_mask[i] ? dembedded[i] * trace.dropout_scale : 0.0;
    }
  }
  for (std::size_t b = 0; b < batch; ++b) {
    params.embed.backward(trace.input.row(b),
                          std::span<const double>(dembedded.data()).subspan(b * embed_out, embed_out),
                          std::span<double>());
  }
}

ModelPair build_model(const BackboneConfig& config, Rng& rng) {
  config.validate();

  Params student;
  student.embed = AffineMap(config.tokens * config.channels, config.input_dim);
  student.embed.init_kaiming(rng);
  student.block_linear = AffineMap(config.channels, config.channels);
  student.block_linear.init_kaiming(rng);
  student.experts = make_expert_layout(config.experts, config.agnostic_experts,
                                       config.channels, config.hidden_size, rng);
  student.heads.dar_head = AffineMap(config.experts, config.channels);
  student.heads.dar_head.init_normal(rng, 0.1);
  student.heads.asg_head = AffineMap(config.experts, config.channels);
  student.heads.asg_head.init_normal(rng, 0.1);
  student.classifier = AffineMap(config.classes, config.channels);
  student.classifier.init_kaiming(rng);
  student.gating = config.gating;

  ModelPair pair;
  pair.config = config;
  pair.student = student;
  pair.teacher = student;
  pair.snapshot = student;
  pair.step = 0;
  return pair;
}

void ema_update(ModelPair& pair, double alpha) {
  if (!(alpha >= 0.0) || alpha >= 1.0) {
    throw std::invalid_argument("ema_update: alpha must lie in [0,1)");
  }
  const auto student = flatten_params(pair.student);
  auto teacher = flatten_params(pair.teacher);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    teacher[i] = alpha * teacher[i] + (1.0 - alpha) * student[i];
  }
  unflatten_params(pair.teacher, teacher);
}

std::size_t restore_stochastic(Params& student, const Params& snapshot, double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) {
    throw std::invalid_argument("restore_stochastic: rate outside [0,1]");
  }
  if (rate == 0.0) return 0;
  auto values = flatten_params(student);
  const auto source = flatten_params(snapshot);
  if (values.size() != source.size()) {
    throw std::invalid_argument("restore_stochastic: structure mismatch");
  }
  std::size_t restored = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (rate >= 1.0 || rng.bernoulli(rate)) {
      values[i] = source[i];
      ++restored;
    }
  }
  unflatten_params(student, values);
  return restored;
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(Params& params) {
  auto values = flatten_params(params);
  const auto grads = flatten_grads(params);
  if (m_.empty()) {
    m_.assign(values.size(), 0.0);
    v_.assign(values.size(), 0.0);
  }
  if (m_.size() != values.size()) {
    throw std::invalid_argument("AdamOptimizer: parameter count changed");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < values.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    values[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
  }
  unflatten_params(params, values);
  params.zero_grad();
}

void AdamOptimizer::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

namespace {

void write_values(std::ostream& out, const std::vector<double>& values) {
  char buf[64];
  for (double v : values) {
    std::snprintf(buf, sizeof(buf), " %a", v);
    out << buf;
  }
  out << '\n';
}

std::vector<double> read_values(std::istream& in, std::size_t count) {
  std::string line;
  if (!std::getline(in >> std::ws, line)) {
    throw std::invalid_argument("checkpoint: truncated file");
  }
  std::vector<double> values;
  values.reserve(count);
  const char* p = line.c_str();
  char* end = nullptr;
  for (std::size_t i = 0; i < count; ++i) {
    const double v = std::strtod(p, &end);
    if (end == p) throw std::invalid_argument("checkpoint: malformed value row");
    values.push_back(v);
    p = end;
  }
  return values;
}

}  // namespace

void save_checkpoint(const Params& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("save_checkpoint: cannot open " + path);
  out << "moase-checkpoint v1\n";
  params.for_each_map([&out](const std::string& name, const AffineMap& map) {
    out << "map " << name << ' ' << map.out_dim() << ' ' << map.in_dim() << '\n';
    write_values(out, map.weight());
    write_values(out, map.bias());
  });
  if (!out) throw std::invalid_argument("save_checkpoint: write failed for " + path);
}

void load_checkpoint(Params& params, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("load_checkpoint: cannot open " + path);
  std::string header;
  std::getline(in, header);
  if (header != "moase-checkpoint v1") {
    throw std::invalid_argument("load_checkpoint: unrecognized header in " + path);
  }
  params.for_each_map([&in](const std::string& name, AffineMap& map) {
    std::string tag, got_name;
    std::size_t out_dim = 0, in_dim = 0;
    in >> tag >> got_name >> out_dim >> in_dim;
    if (tag != "map" || got_name != name || out_dim != map.out_dim() || in_dim != map.in_dim()) {
      throw std::invalid_argument("load_checkpoint: structure mismatch at " + name);
    }
    map.weight() = read_values(in, map.weight().size());
    map.bias() = read_values(in, map.bias().size());
  });
}

}  // namespace moase
