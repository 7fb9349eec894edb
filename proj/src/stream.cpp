#include "moase/stream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ostream>
#include <sstream>

namespace moase {

CorruptionFamily corruption_from_string(const std::string& name) {
  if (name == "gauss-noise") return CorruptionFamily::GaussNoise;
  if (name == "smooth") return CorruptionFamily::Smooth;
  if (name == "contrast") return CorruptionFamily::Contrast;
  if (name == "brightness") return CorruptionFamily::Brightness;
  if (name == "occlude") return CorruptionFamily::Occlude;
  if (name == "identity") return CorruptionFamily::Identity;
  throw ConfigError("unknown corruption family: " + name);
}

std::string to_string(CorruptionFamily family) {
  switch (family) {
    case CorruptionFamily::GaussNoise: return "gauss-noise";
    case CorruptionFamily::Smooth: return "smooth";
    case CorruptionFamily::Contrast: return "contrast";
    case CorruptionFamily::Brightness: return "brightness";
    case CorruptionFamily::Occlude: return "occlude";
    case CorruptionFamily::Identity: return "identity";
  }
  return "identity";
}

void StreamConfig::validate() const {
  if (task.classes < 2) throw ConfigError("task.classes: need at least two classes");
  if (task.input_dim == 0) throw ConfigError("task.input_dim: must be positive");
  if (!(task.blob_sigma > 0.0)) throw ConfigError("task.blob_sigma: must be positive");
  if (task.class_separation < 0.0) throw ConfigError("task.class_separation: must be nonnegative");
  if (domains.empty()) throw ConfigError("stream.domains: sequence must be non-empty");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto path = "stream.domains[" + std::to_string(i) + "]";
    if (domains[i].severity < 1 || domains[i].severity > 5) {
      throw ConfigError(path + ".severity: must lie in 1..5");
    }
    if (domains[i].duration < 1) throw ConfigError(path + ".duration: must be at least 1");
    if (domains[i].name.empty()) throw ConfigError(path + ".name: must be non-empty");
  }
  if (rounds < 1) throw ConfigError("stream.rounds: must be at least 1");
  if (batch_size < 1) throw ConfigError("stream.batch_size: must be at least 1");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr: must be positive");
  if (!(pretrain_lr > 0.0)) throw ConfigError("train.pretrain_lr: must be positive");
  if (!(policy_lr > 0.0)) throw ConfigError("train.policy_lr: must be positive");
  if (pretrain_batch == 0) throw ConfigError("train.pretrain_batch: must be positive");
  if (val_samples == 0) throw ConfigError("train.val_samples: must be positive");
  if (!(pretrain_target_acc > 0.0) || pretrain_target_acc > 1.0) {
    throw ConfigError("train.pretrain_target_acc: must lie in (0,1]");
  }
}

void DiagnosticsConfig::validate() const {
  if (window_per_class == 0) throw ConfigError("diagnostics.window_per_class: must be positive");
  if (bins < 2) throw ConfigError("diagnostics.bins: need at least two bins");
  if (!(range_sigmas > 0.0)) throw ConfigError("diagnostics.range_sigmas: must be positive");
  if (source_feature_samples == 0) {
    throw ConfigError("diagnostics.source_feature_samples: must be positive");
  }
}

double severity_strength(CorruptionFamily family, int severity, const PolicyConfig& kernels) {
  if (family == CorruptionFamily::Identity) return 0.0;
  const double level = static_cast<double>(severity) / 5.0;
  switch (family) {
    case CorruptionFamily::GaussNoise: return level * kernels.strength_scales[0];
    case CorruptionFamily::Smooth: return level * kernels.strength_scales[1];
    case CorruptionFamily::Contrast: return level * kernels.strength_scales[2];
    case CorruptionFamily::Brightness: return level * kernels.strength_scales[3];
    case CorruptionFamily::Occlude: return level * kernels.strength_scales[4];
    case CorruptionFamily::Identity: return 0.0;
  }
  return 0.0;
}

StreamGenerator::StreamGenerator(StreamConfig config, PolicyConfig kernels)
    : config_(std::move(config)),
      kernels_(std::move(kernels)),
      data_rng_(config_.seed, rng_streams::kData),
      corrupt_rng_(config_.seed, rng_streams::kCorrupt) {
  config_.validate();
  kernels_.validate();

  // Class means: random unit directions scaled to the class separation.
  Rng mean_rng(config_.seed, rng_streams::kModelInit + 100);
  means_.resize(config_.task.classes);
  for (auto& mean : means_) {
    mean.resize(config_.task.input_dim);
    long double norm2 = 0.0L;
    for (double& v : mean) {
      v = mean_rng.normal();
      norm2 += static_cast<long double>(v) * v;
    }
    const double norm = std::sqrt(static_cast<double>(norm2));
    for (double& v : mean) v = config_.task.class_separation * v / norm;
  }
}

Tensor StreamGenerator::clean_batch(std::size_t count, std::vector<int>& labels, Rng& rng) const {
  Tensor x({count, config_.task.input_dim});
  labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = rng.uniform_index(config_.task.classes);
    labels[i] = static_cast<int>(c);
    auto row = x.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) {
      row[d] = means_[c][d] + config_.task.blob_sigma * rng.normal();
    }
  }
  return x;
}

LabeledSet StreamGenerator::clean_set(std::size_t count, Rng& rng) const {
  LabeledSet set;
  set.x = clean_batch(count, set.labels, rng);
  return set;
}

LabeledSet StreamGenerator::corrupted_set(const DomainSpec& spec, std::size_t count, Rng& rng) const {
  LabeledSet set = clean_set(count, rng);
  corrupt(set.x, spec, rng);
  return set;
}

void StreamGenerator::corrupt(Tensor& x, const DomainSpec& spec, Rng& rng) const {
  const double strength = severity_strength(spec.family, spec.severity, kernels_);
  switch (spec.family) {
    case CorruptionFamily::GaussNoise:
      apply_gauss_noise(x, strength, rng);
      break;
    case CorruptionFamily::Smooth:
      apply_smooth(x, std::min(1.0, strength));
      break;
    case CorruptionFamily::Contrast:
      apply_contrast(x, 1.0 - strength);  // shrink toward the sample mean
      break;
    case CorruptionFamily::Brightness:
      apply_brightness(x, strength);
      break;
    case CorruptionFamily::Occlude:
      apply_occlude(x, std::min(1.0, strength), rng);
      break;
    case CorruptionFamily::Identity:
      break;
  }
  clamp_to_range(x, kernels_.data_min, kernels_.data_max);
}

std::size_t StreamGenerator::total_batches() const {
  std::size_t per_round = 0;
  for (const auto& d : config_.domains) per_round += d.duration;
  return per_round * config_.rounds;
}

void StreamGenerator::reset() {
  cursor_ = 0;
  data_rng_ = Rng(config_.seed, rng_streams::kData);
  corrupt_rng_ = Rng(config_.seed, rng_streams::kCorrupt);
}

bool StreamGenerator::next(StreamBatch& out) {
  if (cursor_ >= total_batches()) return false;

  std::size_t per_round = 0;
  for (const auto& d : config_.domains) per_round += d.duration;
  const std::size_t round = cursor_ / per_round;
  std::size_t within = cursor_ % per_round;
  std::size_t domain_index = 0;
  while (within >= config_.domains[domain_index].duration) {
    within -= config_.domains[domain_index].duration;
    ++domain_index;
  }
  const DomainSpec& spec = config_.domains[domain_index];

  out.x = clean_batch(config_.batch_size, out.labels, data_rng_);
  corrupt(out.x, spec, corrupt_rng_);
  out.domain_index = domain_index;
  out.round = round;
  out.domain_name = spec.name;
  ++cursor_;
  return true;
}

std::uint64_t StreamGenerator::corruption_fingerprint(std::size_t round) const {
  if (round >= config_.rounds) throw std::invalid_argument("corruption_fingerprint: round out of range");
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_u64 = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFULL;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& d : config_.domains) {
    mix_u64(static_cast<std::uint64_t>(d.family));
    mix_u64(static_cast<std::uint64_t>(d.severity));
    const double strength = severity_strength(d.family, d.severity, kernels_);
    std::uint64_t bits = 0;
    std::memcpy(&bits, &strength, sizeof(bits));
    mix_u64(bits);
  }
  return h;
}

namespace {

double accuracy(const Params& params, const ModelOptions& options, const LabeledSet& set) {
  const ForwardResult result = model_forward(params, set.x, options, nullptr);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    auto row = result.logits.row(i);
    const auto arg = std::distance(row.begin(), std::max_element(row.begin(), row.end()));
    if (static_cast<int>(arg) == set.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.labels.size());
}

double batch_error(const Tensor& logits, const std::vector<int>& labels) {
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = logits.row(i);
    const auto arg = std::distance(row.begin(), std::max_element(row.begin(), row.end()));
    if (static_cast<int>(arg) != labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

}  // namespace

PretrainResult pretrain_source(const StreamConfig& stream, const BackboneConfig& model,
                               const TrainConfig& train) {
  stream.validate();
  model.validate();
  train.validate();

  StreamGenerator gen(stream, PolicyConfig{});
  Rng model_rng(stream.seed, rng_streams::kModelInit);
  PretrainResult result{build_model(model, model_rng), 0.0, false, 0};

  Rng data_rng(stream.seed, rng_streams::kPretrainData);
  Rng val_rng(stream.seed, rng_streams::kValidation);
  const LabeledSet val = gen.clean_set(train.val_samples, val_rng);

  const ModelOptions options{.adapter_enabled = false};
  AdamOptimizer opt(train.pretrain_lr, train.beta1, train.beta2);
  const std::size_t classes = model.classes;

  while (result.steps < train.pretrain_steps) {
    std::vector<int> labels;
    const Tensor x = gen.clean_batch(train.pretrain_batch, labels, data_rng);

    ForwardTrace trace;
    const ForwardResult out = model_forward(result.pair.student, x, options, &trace);

    Tensor dlogits({x.extent(0), classes});
    for (std::size_t b = 0; b < x.extent(0); ++b) {
      const auto p = softmax(out.logits.row(b), 1.0);
      auto grad = dlogits.row(b);
      for (std::size_t c = 0; c < classes; ++c) {
        grad[c] = (p[c] - (static_cast<int>(c) == labels[b] ? 1.0 : 0.0)) /
                  static_cast<double>(x.extent(0));
      }
    }
    result.pair.student.zero_grad();
    model_backward(result.pair.student, trace, dlogits);
    opt.step(result.pair.student);
    ++result.steps;

    if (result.steps % 25 == 0) {
      result.accuracy = accuracy(result.pair.student, options, val);
      if (result.accuracy >= train.pretrain_target_acc) {
        result.reached_target = true;
        break;
      }
    }
  }
  if (!result.reached_target) {
    result.accuracy = accuracy(result.pair.student, options, val);
    result.reached_target = result.accuracy >= train.pretrain_target_acc;
  }

  result.pair.teacher = result.pair.student;
  result.pair.snapshot = result.pair.student;
  result.pair.step = 0;
  return result;
}

Mode mode_from_string(const std::string& name) {
  if (name == "source-frozen") return Mode::SourceFrozen;
  if (name == "mean-teacher-only") return Mode::MeanTeacherOnly;
  if (name == "moase") return Mode::Moase;
  if (name == "moase++") return Mode::MoasePlusPlus;
  throw ConfigError("unknown mode: " + name);
}

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::SourceFrozen: return "source-frozen";
    case Mode::MeanTeacherOnly: return "mean-teacher-only";
    case Mode::Moase: return "moase";
    case Mode::MoasePlusPlus: return "moase++";
  }
  return "source-frozen";
}

EpisodeMetrics run_episode(const EpisodeSetup& setup, Mode mode) {
  const PretrainResult pretrained = pretrain_source(setup.stream, setup.model, setup.train);
  return run_episode(setup, mode, pretrained.pair, pretrained.accuracy,
                     !pretrained.reached_target);
}

EpisodeMetrics run_episode(const EpisodeSetup& setup, Mode mode, const ModelPair& pretrained,
                           double source_accuracy, bool pretrain_warning) {
  setup.stream.validate();
  setup.daopd.validate();
  setup.policy.validate();
  setup.diagnostics.validate();

  EpisodeMetrics metrics;
  metrics.source_accuracy = source_accuracy;
  metrics.pretrain_warning = pretrain_warning;

  // Mode wiring: which paths are active during adaptation.
  DaopdConfig daopd = setup.daopd;
  ModelOptions options;
  switch (mode) {
    case Mode::SourceFrozen:
      options.adapter_enabled = true;
      break;
    case Mode::MeanTeacherOnly:
      options.adapter_enabled = false;
      daopd.opd_weight = 0.0;
      daopd.rl_enabled = false;
      break;
    case Mode::Moase:
      options.adapter_enabled = true;
      daopd.opd_weight = 0.0;
      daopd.rl_enabled = false;
      break;
    case Mode::MoasePlusPlus:
      options.adapter_enabled = true;
      break;
  }

  DaopdEngine engine(pretrained, daopd, setup.policy, options, setup.train.lr,
                     setup.train.policy_lr, Rng(setup.stream.seed, rng_streams::kPolicyInit));

  // Source feature bank: domain 0, clean data through the pretrained model.
  StreamGenerator gen(setup.stream, setup.policy);
  FeatureBank bank(setup.diagnostics.window_per_class);
  {
    Rng feat_rng(setup.stream.seed, rng_streams::kSourceFeatures);
    const LabeledSet source = gen.clean_set(setup.diagnostics.source_feature_samples, feat_rng);
    const ForwardResult out = model_forward(engine.pair().student, source.x, options, nullptr);
    for (std::size_t i = 0; i < source.labels.size(); ++i) {
      auto row = out.features.row(i);
      bank.add(0, source.labels[i], std::vector<double>(row.begin(), row.end()));
    }
  }
  bank.fit_projection(0);
  const auto hist_range = bank.projected_range(0, setup.diagnostics.range_sigmas);
  const Histogram source_hist =
      feature_histogram(bank, 0, setup.diagnostics.bins, hist_range);

  Rng episode_rng(setup.stream.seed, rng_streams::kEpisode);
  const std::size_t classes = setup.stream.task.classes;

  struct Accumulator {
    double error = 0.0, js = 0.0, ic = 0.0;
    std::size_t n = 0, ic_n = 0;
  };
  std::vector<Accumulator> per_visit(setup.stream.domains.size() * setup.stream.rounds);

  StreamBatch batch;
  std::size_t step = 0;
  long double total_error = 0.0L;
  while (gen.next(batch)) {
    const auto t0 = std::chrono::steady_clock::now();

    StepOutcome outcome;
    if (mode == Mode::SourceFrozen) {
      outcome = engine.evaluate_only(batch.x);
    } else {
      outcome = engine.step(batch.x, episode_rng);
    }

    StepRecord record;
    record.step = step;
    record.round = batch.round;
    record.domain = batch.domain_name;
    record.online_error = batch_error(outcome.clean_logits, batch.labels);
    record.loss_cons = outcome.loss_cons;
    record.loss_daopd = outcome.loss_daopd;
    record.reward_value = outcome.reward_value;
    record.baseline = outcome.baseline;
    record.phi_mean = outcome.phi_mean;

    // Evaluator-side diagnostics: the hidden labels feed the bank only.
    const int domain_id = static_cast<int>(batch.domain_index) + 1;
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      auto row = outcome.features.row(i);
      bank.add(domain_id, batch.labels[i], std::vector<double>(row.begin(), row.end()));
    }
    const Histogram domain_hist =
        feature_histogram(bank, domain_id, setup.diagnostics.bins, hist_range);
    record.js_source = js_divergence(source_hist.mass, domain_hist.mass);

    const FeatureBank current = bank.filtered(domain_id);
    record.ic_per_class.assign(classes, std::nan(""));
    double ic_sum = 0.0;
    std::size_t ic_count = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (!current.has_class(static_cast<int>(c))) continue;
      const double ic = intra_class_divergence(current, static_cast<int>(c));
      record.ic_per_class[c] = ic;
      ic_sum += ic;
      ++ic_count;
    }

    const auto t1 = std::chrono::steady_clock::now();
    record.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    auto& acc = per_visit[batch.round * setup.stream.domains.size() + batch.domain_index];
    acc.error += record.online_error;
    acc.js += record.js_source;
    if (ic_count > 0) {
      acc.ic += ic_sum / static_cast<double>(ic_count);
      ++acc.ic_n;
    }
    ++acc.n;
    total_error += record.online_error;

    metrics.steps.push_back(std::move(record));
    ++step;
  }

  for (std::size_t r = 0; r < setup.stream.rounds; ++r) {
    for (std::size_t d = 0; d < setup.stream.domains.size(); ++d) {
      const auto& acc = per_visit[r * setup.stream.domains.size() + d];
      DomainSummary summary;
      summary.domain = setup.stream.domains[d].name;
      summary.round = r;
      summary.mean_error = acc.n ? acc.error / static_cast<double>(acc.n) : 0.0;
      summary.mean_js = acc.n ? acc.js / static_cast<double>(acc.n) : 0.0;
      summary.mean_ic = acc.ic_n ? acc.ic / static_cast<double>(acc.ic_n) : 0.0;
      metrics.domains.push_back(std::move(summary));
    }
    metrics.round_fingerprints.push_back(gen.corruption_fingerprint(r));
  }
  metrics.overall_error =
      metrics.steps.empty() ? 0.0 : static_cast<double>(total_error) / metrics.steps.size();
  return metrics;
}

namespace {

void append_json_double(std::ostream& out, double v) {
  if (std::isnan(v)) {
    out << "null";
  } else {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    out << buf;
  }
}

void append_record(std::ostream& out, const StepRecord& r, bool with_wall) {
  out << "{\"step\":" << r.step << ",\"round\":" << r.round << ",\"domain\":\"" << r.domain
      << "\",\"online_error\":";
  append_json_double(out, r.online_error);
  out << ",\"loss_cons\":";
  append_json_double(out, r.loss_cons);
  out << ",\"loss_daopd\":";
  append_json_double(out, r.loss_daopd);
  out << ",\"reward\":";
  append_json_double(out, r.reward_value);
  out << ",\"baseline\":";
  append_json_double(out, r.baseline);
  out << ",\"phi_mean\":[";
  for (std::size_t i = 0; i < r.phi_mean.size(); ++i) {
    if (i) out << ',';
    append_json_double(out, r.phi_mean[i]);
  }
  out << "],\"js_source\":";
  append_json_double(out, r.js_source);
  out << ",\"ic\":[";
  for (std::size_t i = 0; i < r.ic_per_class.size(); ++i) {
    if (i) out << ',';
    append_json_double(out, r.ic_per_class[i]);
  }
  out << ']';
  if (with_wall) {
    out << ",\"wall_ms\":";
    append_json_double(out, r.wall_ms);
  }
  out << '}';
}

}  // namespace

void write_metrics_jsonl(const EpisodeMetrics& metrics, std::ostream& out) {
  for (const auto& r : metrics.steps) {
    append_record(out, r, true);
    out << '\n';
  }
}

void write_summary_csv(const EpisodeMetrics& metrics, std::ostream& out) {
  out << "domain,round,mean_error,js,ic\n";
  for (const auto& d : metrics.domains) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f,%.6f,%.6f\n", d.domain.c_str(), d.round,
                  d.mean_error, d.mean_js, d.mean_ic);
    out << buf;
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "overall,,%.6f,,\n", metrics.overall_error);
  out << buf;
}

std::string determinism_key(const EpisodeMetrics& metrics) {
  std::ostringstream out;
  for (const auto& r : metrics.steps) {
    append_record(out, r, false);
    out << '\n';
  }
  for (std::uint64_t f : metrics.round_fingerprints) out << f << '\n';
  return out.str();
}

}  // namespace moase
