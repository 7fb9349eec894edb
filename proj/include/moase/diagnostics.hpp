#pragma once

// Divergence diagnostics: Jensen-Shannon distance between projected feature
// histograms, intra-class divergence, and an empirical report of the
// source-error + divergence + label-discrepancy bound on the target error.

#include <cstddef>
#include <deque>
#include <map>
#include <utility>
#include <vector>

#include "moase/model.hpp"
#include "moase/numeric.hpp"

namespace moase {

struct FeatureEntry {
  int domain = 0;
  int label = 0;
  std::vector<double> feature;
};

// Rolling store of (domain, class, feature) with FIFO eviction per
// (domain, class) pair. Domain 0 holds the source features by convention.
class FeatureBank {
 public:
  explicit FeatureBank(std::size_t capacity_per_domain_class = 64);

  void add(int domain, int label, std::vector<double> feature);

  std::size_t size() const { return total_; }
  std::size_t feature_dim() const { return feature_dim_; }
  bool has_domain(int domain) const;
  bool has_class(int label) const;
  std::vector<const FeatureEntry*> domain_entries(int domain) const;
  std::vector<const FeatureEntry*> class_entries(int label) const;
  std::vector<int> classes_in_domain(int domain) const;

  // Copy containing only one domain's entries (projection carried over).
  FeatureBank filtered(int domain) const;

  // Fits the fixed 1-D projection: first principal direction of the given
  // domain's features, by deterministic power iteration.
  void fit_projection(int source_domain);
  bool has_projection() const { return !projection_.empty(); }
  const std::vector<double>& projection() const;
  double project(std::span<const double> feature) const;

  // Mean +/- k*stddev of the projected source features; used as the fixed
  // histogram range.
  std::pair<double, double> projected_range(int domain, double k_sigma) const;

 private:
  std::size_t capacity_ = 64;
  std::size_t feature_dim_ = 0;
  std::size_t total_ = 0;
  std::map<std::pair<int, int>, std::deque<FeatureEntry>> entries_;
  std::vector<double> projection_;
};

struct Histogram {
  std::vector<double> mass;  // normalized
  double lo = 0.0;
  double hi = 1.0;
};

// JS(P || Q) in nats, in [0, ln 2]. Inputs must be normalized within 1e-6.
double js_divergence(std::span<const double> p, std::span<const double> q);

// Mean squared distance of class-c features to their centroid.
double intra_class_divergence(const FeatureBank& bank, int label);

// 1-D histogram of the bank's projected features for one domain;
// out-of-range values land in the edge bins.
Histogram feature_histogram(const FeatureBank& bank, int domain, std::size_t bins,
                            std::pair<double, double> range);

struct LabeledSet {
  Tensor x;                 // [n x input_dim]
  std::vector<int> labels;  // n
};

struct BoundReport {
  double eps_T = 0.0;
  double eps_S = 0.0;
  double divergence = 0.0;  // JS surrogate
  double label_disc = 0.0;
  double slack = 0.0;       // (eps_S + divergence + label_disc) - eps_T
};

// Empirical check of the target-error bound on labeled synthetic sets.
// Labeling functions are realized as nearest-class-centroid rules fit on
// each set; their disagreement rate gives the label-discrepancy term.
BoundReport bound_check(const Params& model, const ModelOptions& options,
                        const LabeledSet& source, const LabeledSet& target,
                        const Histogram& source_hist, const Histogram& target_hist);

}  // namespace moase
