#pragma once

// Synthetic continual-domain streams over a Gaussian class-blob task,
// source pretraining, and the evaluate-then-adapt episode loop. Labels are
// generated but kept on the evaluator side; adaptation only ever sees the
// input tensors.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "moase/daopd.hpp"
#include "moase/diagnostics.hpp"
#include "moase/model.hpp"
#include "moase/policy.hpp"

namespace moase {

enum class CorruptionFamily { GaussNoise, Smooth, Contrast, Brightness, Occlude, Identity };

CorruptionFamily corruption_from_string(const std::string& name);
std::string to_string(CorruptionFamily family);

struct DomainSpec {
  std::string name;
  CorruptionFamily family = CorruptionFamily::Identity;
  int severity = 5;          // 1..5
  std::size_t duration = 50; // batches per visit
};

struct TaskConfig {
  std::size_t classes = 4;
  std::size_t input_dim = 16;
  double class_separation = 4.0;
  double blob_sigma = 1.0;
};

struct StreamConfig {
  TaskConfig task;
  std::vector<DomainSpec> domains;
  std::size_t rounds = 1;
  std::size_t batch_size = 40;
  std::uint64_t seed = 1;

  void validate() const;  // throws ConfigError with the offending field path
};

struct StreamBatch {
  Tensor x;
  std::vector<int> labels;  // evaluator-only
  std::size_t domain_index = 0;
  std::size_t round = 0;
  std::string domain_name;
};

// Kernel magnitude for a corruption at a given severity: linear in
// severity with the per-family max shared with the augmenter.
double severity_strength(CorruptionFamily family, int severity, const PolicyConfig& kernels);

class StreamGenerator {
 public:
  StreamGenerator(StreamConfig config, PolicyConfig kernels);

  bool next(StreamBatch& out);
  void reset();
  std::size_t total_batches() const;

  const StreamConfig& config() const { return config_; }
  const std::vector<std::vector<double>>& class_means() const { return means_; }

  Tensor clean_batch(std::size_t count, std::vector<int>& labels, Rng& rng) const;
  LabeledSet clean_set(std::size_t count, Rng& rng) const;
  LabeledSet corrupted_set(const DomainSpec& spec, std::size_t count, Rng& rng) const;

  // Hash of the corruption parameters (family, severity, mapped strength)
  // a round applies, in visit order. Rounds revisit identical parameters.
  std::uint64_t corruption_fingerprint(std::size_t round) const;

 private:
  void corrupt(Tensor& x, const DomainSpec& spec, Rng& rng) const;

  StreamConfig config_;
  PolicyConfig kernels_;
  std::vector<std::vector<double>> means_;
  Rng data_rng_;
  Rng corrupt_rng_;
  std::size_t cursor_ = 0;
};

struct TrainConfig {
  double lr = 1e-4;  // adaptation learning rate
  double beta1 = 0.9;
  double beta2 = 0.99;
  double policy_lr = 1e-3;
  double pretrain_lr = 1e-2;
  std::size_t pretrain_steps = 3000;
  std::size_t pretrain_batch = 64;
  double pretrain_target_acc = 0.95;
  std::size_t val_samples = 1000;

  void validate() const;
};

struct DiagnosticsConfig {
  std::size_t window_per_class = 64;  // rolling FIFO per (domain, class)
  std::size_t bins = 32;
  double range_sigmas = 4.0;
  std::size_t source_feature_samples = 512;

  void validate() const;
};

struct PretrainResult {
  ModelPair pair;
  double accuracy = 0.0;
  bool reached_target = false;
  std::size_t steps = 0;
};

// Supervised training on clean source data until the validation accuracy
// target or the step cap; the adapter branch stays out of the graph. The
// final state seeds student, teacher and the restoration snapshot alike.
PretrainResult pretrain_source(const StreamConfig& stream, const BackboneConfig& model,
                               const TrainConfig& train);

enum class Mode { SourceFrozen, MeanTeacherOnly, Moase, MoasePlusPlus };

Mode mode_from_string(const std::string& name);
std::string to_string(Mode mode);

struct StepRecord {
  std::size_t step = 0;
  std::size_t round = 0;
  std::string domain;
  double online_error = 0.0;
  double loss_cons = 0.0;
  double loss_daopd = 0.0;
  double reward_value = 0.0;
  double baseline = 0.0;
  std::vector<double> phi_mean;
  double js_source = 0.0;
  std::vector<double> ic_per_class;  // NaN where the class is absent
  double wall_ms = 0.0;              // excluded from determinism checks
};

struct DomainSummary {
  std::string domain;
  std::size_t round = 0;
  double mean_error = 0.0;
  double mean_js = 0.0;
  double mean_ic = 0.0;
};

struct EpisodeMetrics {
  std::vector<StepRecord> steps;
  std::vector<DomainSummary> domains;
  double overall_error = 0.0;
  double source_accuracy = 0.0;
  bool pretrain_warning = false;
  std::vector<std::uint64_t> round_fingerprints;
};

struct EpisodeSetup {
  StreamConfig stream;
  BackboneConfig model;
  TrainConfig train;
  DaopdConfig daopd;
  PolicyConfig policy;
  DiagnosticsConfig diagnostics;
};

EpisodeMetrics run_episode(const EpisodeSetup& setup, Mode mode);
EpisodeMetrics run_episode(const EpisodeSetup& setup, Mode mode, const ModelPair& pretrained,
                           double source_accuracy, bool pretrain_warning);

void write_metrics_jsonl(const EpisodeMetrics& metrics, std::ostream& out);
void write_summary_csv(const EpisodeMetrics& metrics, std::ostream& out);

// Serialized step records without the wall-clock field; equal strings mean
// equal episodes.
std::string determinism_key(const EpisodeMetrics& metrics);

// Fixed stream ids deriving independent rng sequences from one seed, so
// e.g. the data stream is identical across modes for paired comparisons.
namespace rng_streams {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kCorrupt = 2;
inline constexpr std::uint64_t kModelInit = 3;
inline constexpr std::uint64_t kPretrainData = 4;
inline constexpr std::uint64_t kValidation = 5;
inline constexpr std::uint64_t kPolicyInit = 6;
inline constexpr std::uint64_t kEpisode = 7;
inline constexpr std::uint64_t kSourceFeatures = 8;
}  // namespace rng_streams

}  // namespace moase
