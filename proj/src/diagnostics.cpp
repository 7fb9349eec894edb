#include "moase/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace moase {

FeatureBank::FeatureBank(std::size_t capacity_per_domain_class)
    : capacity_(std::max<std::size_t>(1, capacity_per_domain_class)) {}

void FeatureBank::add(int domain, int label, std::vector<double> feature) {
  if (feature.empty()) throw std::invalid_argument("FeatureBank::add: empty feature");
  if (feature_dim_ == 0) feature_dim_ = feature.size();
  if (feature.size() != feature_dim_) {
    throw std::invalid_argument("FeatureBank::add: feature length mismatch");
  }
  auto& slot = entries_[{domain, label}];
  slot.push_back(FeatureEntry{domain, label, std::move(feature)});
  ++total_;
  while (slot.size() > capacity_) {
    slot.pop_front();
    --total_;
  }
}

bool FeatureBank::has_domain(int domain) const {
  for (const auto& [key, slot] : entries_) {
    if (key.first == domain && !slot.empty()) return true;
  }
  return false;
}

bool FeatureBank::has_class(int label) const {
  for (const auto& [key, slot] : entries_) {
    if (key.second == label && !slot.empty()) return true;
  }
  return false;
}

std::vector<const FeatureEntry*> FeatureBank::domain_entries(int domain) const {
  std::vector<const FeatureEntry*> out;
  for (const auto& [key, slot] : entries_) {
    if (key.first != domain) continue;
    for (const auto& e : slot) out.push_back(&e);
  }
  return out;
}

std::vector<const FeatureEntry*> FeatureBank::class_entries(int label) const {
  std::vector<const FeatureEntry*> out;
  for (const auto& [key, slot] : entries_) {
    if (key.second != label) continue;
    for (const auto& e : slot) out.push_back(&e);
  }
  return out;
}

std::vector<int> FeatureBank::classes_in_domain(int domain) const {
  std::set<int> seen;
  for (const auto& [key, slot] : entries_) {
    if (key.first == domain && !slot.empty()) seen.insert(key.second);
  }
  return std::vector<int>(seen.begin(), seen.end());
}

FeatureBank FeatureBank::filtered(int domain) const {
  FeatureBank out(capacity_);
  out.projection_ = projection_;
  for (const auto& [key, slot] : entries_) {
    if (key.first != domain) continue;
    for (const auto& e : slot) out.add(e.domain, e.label, e.feature);
  }
  return out;
}

void FeatureBank::fit_projection(int source_domain) {
  const auto entries = domain_entries(source_domain);
  if (entries.empty()) throw std::invalid_argument("fit_projection: empty source domain");
  const std::size_t d = feature_dim_;

  std::vector<double> mean(d, 0.0);
  for (const auto* e : entries) {
    for (std::size_t i = 0; i < d; ++i) mean[i] += e->feature[i];
  }
  for (double& v : mean) v /= static_cast<double>(entries.size());

  std::vector<double> cov(d * d, 0.0);
  for (const auto* e : entries) {
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = e->feature[i] - mean[i];
      for (std::size_t j = 0; j < d; ++j) {
        cov[i * d + j] += xi * (e->feature[j] - mean[j]);
      }
    }
  }
  for (double& v : cov) v /= static_cast<double>(entries.size());

  // Power iteration from a fixed start; fall back to e0 if the covariance
  // is degenerate.
  std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<double> next(d, 0.0);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < d; ++i) {
      long double acc = 0.0L;
      for (std::size_t j = 0; j < d; ++j) acc += cov[i * d + j] * v[j];
      next[i] = static_cast<double>(acc);
    }
    long double norm = 0.0L;
    for (double x : next) norm += static_cast<long double>(x) * x;
    const double n = std::sqrt(static_cast<double>(norm));
    if (n < 1e-12) {
      std::fill(v.begin(), v.end(), 0.0);
      v[0] = 1.0;
      break;
    }
    for (std::size_t i = 0; i < d; ++i) v[i] = next[i] / n;
  }
  // Canonical sign: first component of non-negligible magnitude is positive.
  for (double x : v) {
    if (std::abs(x) > 1e-9) {
      if (x < 0.0) {
        for (double& y : v) y = -y;
      }
      break;
    }
  }
  projection_ = std::move(v);
}

const std::vector<double>& FeatureBank::projection() const {
  if (projection_.empty()) throw std::logic_error("FeatureBank: projection not fitted");
  return projection_;
}

double FeatureBank::project(std::span<const double> feature) const {
  const auto& p = projection();
  if (feature.size() != p.size()) throw std::invalid_argument("project: length mismatch");
  long double acc = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) acc += p[i] * feature[i];
  return static_cast<double>(acc);
}

std::pair<double, double> FeatureBank::projected_range(int domain, double k_sigma) const {
  const auto entries = domain_entries(domain);
  if (entries.empty()) throw std::invalid_argument("projected_range: empty domain");
  long double sum = 0.0L, sum2 = 0.0L;
  for (const auto* e : entries) {
    const double x = project(e->feature);
    sum += x;
    sum2 += static_cast<long double>(x) * x;
  }
  const double n = static_cast<double>(entries.size());
  const double mean = static_cast<double>(sum / n);
  const double var = std::max(0.0, static_cast<double>(sum2 / n) - mean * mean);
  double half = k_sigma * std::sqrt(var);
  if (half < 1e-6) half = 1.0;  // degenerate spread still needs a window
  return {mean - half, mean + half};
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw std::invalid_argument("js_divergence: bin mismatch");
  long double sp = 0.0L, sq = 0.0L;
  for (double v : p) {
    if (v < 0.0) throw std::invalid_argument("js_divergence: negative mass");
    sp += v;
  }
  for (double v : q) {
    if (v < 0.0) throw std::invalid_argument("js_divergence: negative mass");
    sq += v;
  }
  if (std::abs(static_cast<double>(sp) - 1.0) > 1e-6 ||
      std::abs(static_cast<double>(sq) - 1.0) > 1e-6) {
    throw std::invalid_argument("js_divergence: histograms not normalized");
  }

  std::vector<double> pn(p.begin(), p.end());
  std::vector<double> qn(q.begin(), q.end());
  for (double& v : pn) v = static_cast<double>(v / sp);
  for (double& v : qn) v = static_cast<double>(v / sq);
  std::vector<double> mix(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) mix[i] = 0.5 * (pn[i] + qn[i]);
  return 0.5 * kl_divergence(pn, mix) + 0.5 * kl_divergence(qn, mix);
}

double intra_class_divergence(const FeatureBank& bank, int label) {
  const auto entries = bank.class_entries(label);
  if (entries.empty()) throw std::invalid_argument("intra_class_divergence: empty class");
  const std::size_t d = entries.front()->feature.size();

  std::vector<double> mean(d, 0.0);
  for (const auto* e : entries) {
    for (std::size_t i = 0; i < d; ++i) mean[i] += e->feature[i];
  }
  for (double& v : mean) v /= static_cast<double>(entries.size());

  long double total = 0.0L;
  for (const auto* e : entries) {
    long double dist2 = 0.0L;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = e->feature[i] - mean[i];
      dist2 += static_cast<long double>(diff) * diff;
    }
    total += dist2;
  }
  return static_cast<double>(total / entries.size());
}

Histogram feature_histogram(const FeatureBank& bank, int domain, std::size_t bins,
                            std::pair<double, double> range) {
  if (bins < 2) throw std::invalid_argument("feature_histogram: need at least two bins");
  if (!(range.first < range.second)) throw std::invalid_argument("feature_histogram: bad range");
  const auto entries = bank.domain_entries(domain);
  if (entries.empty()) throw std::invalid_argument("feature_histogram: empty domain");

  Histogram hist;
  hist.lo = range.first;
  hist.hi = range.second;
  hist.mass.assign(bins, 0.0);
  const double width = (range.second - range.first) / static_cast<double>(bins);
  for (const auto* e : entries) {
    const double x = bank.project(e->feature);
    auto idx = static_cast<long>(std::floor((x - range.first) / width));
    idx = std::clamp<long>(idx, 0, static_cast<long>(bins) - 1);
    hist.mass[static_cast<std::size_t>(idx)] += 1.0;
  }
  for (double& v : hist.mass) v /= static_cast<double>(entries.size());
  return hist;
}

namespace {

std::vector<std::vector<double>> class_centroids(const LabeledSet& set, int classes) {
  const std::size_t dim = set.x.extent(1);
  std::vector<std::vector<double>> centroids(classes, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    const int c = set.labels[i];
    auto row = set.x.row(i);
    for (std::size_t d = 0; d < dim; ++d) centroids[c][d] += row[d];
    ++counts[c];
  }
  for (int c = 0; c < classes; ++c) {
    if (counts[c] == 0) continue;
    for (double& v : centroids[c]) v /= static_cast<double>(counts[c]);
  }
  return centroids;
}

int nearest_centroid(std::span<const double> x, const std::vector<std::vector<double>>& centroids,
                     const std::vector<bool>& present) {
  int best = -1;
  double best_dist = 0.0;
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    if (!present[c]) continue;
    long double dist = 0.0L;
    for (std::size_t d = 0; d < x.size(); ++d) {
      const double diff = x[d] - centroids[c][d];
      dist += static_cast<long double>(diff) * diff;
    }
    if (best < 0 || static_cast<double>(dist) < best_dist) {
      best = static_cast<int>(c);
      best_dist = static_cast<double>(dist);
    }
  }
  return best;
}

double error_rate(const Params& model, const ModelOptions& options, const LabeledSet& set) {
  const ForwardResult result = model_forward(model, set.x, options, nullptr);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    auto row = result.logits.row(i);
    const auto arg = std::distance(row.begin(), std::max_element(row.begin(), row.end()));
    if (static_cast<int>(arg) != set.labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(set.labels.size());
}

}  // namespace

BoundReport bound_check(const Params& model, const ModelOptions& options,
                        const LabeledSet& source, const LabeledSet& target,
                        const Histogram& source_hist, const Histogram& target_hist) {
  if (source.labels.empty() || target.labels.empty()) {
    throw std::invalid_argument("bound_check: labeled sets required");
  }
  if (source.labels.size() != source.x.extent(0) || target.labels.size() != target.x.extent(0)) {
    throw std::invalid_argument("bound_check: label count mismatch");
  }

  BoundReport report;
  report.eps_S = error_rate(model, options, source);
  report.eps_T = error_rate(model, options, target);
  report.divergence = js_divergence(source_hist.mass, target_hist.mass);

  const int classes = static_cast<int>(model.classifier.out_dim());
  const auto source_centroids = class_centroids(source, classes);
  const auto target_centroids = class_centroids(target, classes);
  std::vector<bool> source_present(classes, false), target_present(classes, false);
  for (int label : source.labels) source_present[label] = true;
  for (int label : target.labels) target_present[label] = true;

  auto disagreement = [&](const LabeledSet& set) {
    std::size_t diff = 0;
    for (std::size_t i = 0; i < set.labels.size(); ++i) {
      const int fs = nearest_centroid(set.x.row(i), source_centroids, source_present);
      const int ft = nearest_centroid(set.x.row(i), target_centroids, target_present);
      if (fs != ft) ++diff;
    }
    return static_cast<double>(diff) / static_cast<double>(set.labels.size());
  };
  report.label_disc = std::min(disagreement(source), disagreement(target));

  report.slack = (report.eps_S + report.divergence + report.label_disc) - report.eps_T;
  return report;
}

}  // namespace moase
