#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "uq/tensor.hpp"

namespace uq {

/// Member predictive distributions for a batch: probs[n][m][c] flattened
/// into an [N x M x C] tensor, plus the true class per sample.
struct PredictiveSet {
  Tensor probs;                       // [N x M x C]
  std::vector<std::int32_t> labels;   // [N]

  std::size_t num_samples() const { return probs.dim(0); }
  std::size_t num_members() const { return probs.dim(1); }
  std::size_t num_classes() const { return probs.dim(2); }

  const double* member_row(std::size_t n, std::size_t m) const {
    return probs.data() + (n * num_members() + m) * num_classes();
  }

  void validate() const {
    if (probs.rank() != 3) {
      throw std::invalid_argument("PredictiveSet: probs must be [N x M x C]");
    }
    if (labels.size() != num_samples()) {
      throw std::invalid_argument("PredictiveSet: label count mismatch");
    }
    for (std::size_t n = 0; n < num_samples(); ++n) {
      for (std::size_t m = 0; m < num_members(); ++m) {
        const double* row = member_row(n, m);
        double sum = 0.0;
        for (std::size_t c = 0; c < num_classes(); ++c) {
          if (row[c] < 0.0 || row[c] > 1.0) {
            throw std::invalid_argument("PredictiveSet: probability outside [0,1]");
          }
          sum += row[c];
        }
        if (std::abs(sum - 1.0) > 1e-9) {
          throw std::invalid_argument("PredictiveSet: member row sums to " +
                                      std::to_string(sum));
        }
      }
    }
  }
};

/// Per-sample uncertainty summary; these rows become the JSONL artifact.
struct UncertaintyRecord {
  std::int64_t id = 0;
  double entropy = 0.0;
  double mutual_information = 0.0;
  std::vector<double> probs;   // ensemble distribution [C]
  std::int32_t label = 0;
  std::int32_t predicted = 0;
  bool correct = false;
};

/// Max-subtracted softmax for turning one logits row into a distribution.
inline std::vector<double> softmax_values(const double* logits, std::size_t n) {
  if (n == 0) throw std::invalid_argument("softmax_values: empty input");
  double mx = logits[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  std::vector<double> out(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  const double inv = 1.0 / sum;
  for (double& v : out) v *= inv;
  return out;
}

/// Arithmetic mean across members; the ensemble realization of posterior
/// predictive averaging. Averaging happens on probabilities, never logits.
inline std::vector<double> ensemble_predictive(const double* member_probs,
                                               std::size_t members,
                                               std::size_t classes) {
  if (members == 0) {
    throw std::invalid_argument("ensemble_predictive: empty ensemble");
  }
  std::vector<double> mean(classes, 0.0);
  for (std::size_t m = 0; m < members; ++m) {
    for (std::size_t c = 0; c < classes; ++c) mean[c] += member_probs[m * classes + c];
  }
  const double inv = 1.0 / static_cast<double>(members);
  for (double& v : mean) v *= inv;
  return mean;
}

inline std::vector<double> ensemble_predictive(const Tensor& member_probs) {
  if (member_probs.rank() != 2) {
    throw std::invalid_argument("ensemble_predictive: expected [M x C]");
  }
  return ensemble_predictive(member_probs.data(), member_probs.dim(0),
                             member_probs.dim(1));
}

/// Shannon entropy in nats with the 0 log 0 := 0 convention.
inline double predictive_entropy(const double* probs, std::size_t classes) {
  double h = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double p = probs[c];
    if (p < 0.0) {
      throw std::invalid_argument("predictive_entropy: negative probability " +
                                  std::to_string(p));
    }
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

inline double predictive_entropy(const std::vector<double>& probs) {
  return predictive_entropy(probs.data(), probs.size());
}

/// Member-disagreement mutual information: H(mean) - mean(H_member).
/// Tiny negative values (rounding) are clamped to zero; anything beyond
/// the 1e-12 slack is left visible because it would indicate a bug.
inline double mutual_information(const double* member_probs, std::size_t members,
                                 std::size_t classes) {
  const std::vector<double> mean = ensemble_predictive(member_probs, members, classes);
  double avg_h = 0.0;
  for (std::size_t m = 0; m < members; ++m) {
    avg_h += predictive_entropy(member_probs + m * classes, classes);
  }
  avg_h /= static_cast<double>(members);
  double mi = predictive_entropy(mean.data(), classes) - avg_h;
  if (mi < 0.0 && mi > -1e-12) mi = 0.0;
  return mi;
}

inline double mutual_information(const Tensor& member_probs) {
  if (member_probs.rank() != 2) {
    throw std::invalid_argument("mutual_information: expected [M x C]");
  }
  return mutual_information(member_probs.data(), member_probs.dim(0),
                            member_probs.dim(1));
}

/// Argmax with ties resolved toward the lowest class index.
inline std::int32_t argmax_class(const std::vector<double>& probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return static_cast<std::int32_t>(best);
}

/// Expands a PredictiveSet into per-sample records, ids being row indices.
inline std::vector<UncertaintyRecord> build_records(const PredictiveSet& set) {
  std::vector<UncertaintyRecord> records;
  records.reserve(set.num_samples());
  for (std::size_t n = 0; n < set.num_samples(); ++n) {
    UncertaintyRecord rec;
    rec.id = static_cast<std::int64_t>(n);
    rec.probs = ensemble_predictive(set.member_row(n, 0), set.num_members(),
                                    set.num_classes());
    rec.entropy = predictive_entropy(rec.probs);
    rec.mutual_information =
        mutual_information(set.member_row(n, 0), set.num_members(), set.num_classes());
    rec.label = set.labels[n];
    rec.predicted = argmax_class(rec.probs);
    rec.correct = rec.predicted == rec.label;
    records.push_back(std::move(rec));
  }
  return records;
}

inline double accuracy(const std::vector<UncertaintyRecord>& records) {
  if (records.empty()) throw std::invalid_argument("accuracy: empty input");
  double hits = 0.0;
  for (const auto& r : records) hits += r.correct ? 1.0 : 0.0;
  return hits / static_cast<double>(records.size());
}

/// Mean negative log ensemble probability of the true class, in nats.
inline double nll(const std::vector<UncertaintyRecord>& records) {
  if (records.empty()) throw std::invalid_argument("nll: empty input");
  double total = 0.0;
  for (const auto& r : records) {
    total -= std::log(r.probs[static_cast<std::size_t>(r.label)]);
  }
  return total / static_cast<double>(records.size());
}

/// Expected calibration error over equal-width right-closed confidence bins
/// on (0,1]; empty bins contribute nothing.
inline double ece(const std::vector<UncertaintyRecord>& records, std::size_t num_bins = 10) {
  if (num_bins < 1) throw std::invalid_argument("ece: need at least one bin");
  if (records.empty()) return 0.0;
  std::vector<double> conf_sum(num_bins, 0.0), acc_sum(num_bins, 0.0);
  std::vector<std::int64_t> count(num_bins, 0);
  for (const auto& r : records) {
    const double conf = r.probs[static_cast<std::size_t>(argmax_class(r.probs))];
    // Right-closed bins: (0, 1/B], (1/B, 2/B], ..., so conf == k/B lands in
    // bin k-1 and conf == 1.0 lands in the last bin.
    long bin = static_cast<long>(std::ceil(conf * static_cast<double>(num_bins))) - 1;
    bin = std::clamp(bin, 0L, static_cast<long>(num_bins) - 1);
    conf_sum[bin] += conf;
    acc_sum[bin] += r.correct ? 1.0 : 0.0;
    ++count[bin];
  }
  double e = 0.0;
  const double n = static_cast<double>(records.size());
  for (std::size_t b = 0; b < num_bins; ++b) {
    if (count[b] == 0) continue;
    const double cb = static_cast<double>(count[b]);
    e += (cb / n) * std::abs(acc_sum[b] / cb - conf_sum[b] / cb);
  }
  return e;
}

/// Probability that a random out-of-domain score exceeds a random in-domain
/// score, ties half-weighted (Mann-Whitney U with midranks, O(n log n)).
inline double auroc(const std::vector<double>& scores_in,
                    const std::vector<double>& scores_out) {
  if (scores_in.empty() || scores_out.empty()) {
    throw std::invalid_argument("auroc: both score sets must be nonempty");
  }
  struct Tagged {
    double score;
    bool is_out;
  };
  std::vector<Tagged> all;
  all.reserve(scores_in.size() + scores_out.size());
  for (double s : scores_in) all.push_back({s, false});
  for (double s : scores_out) all.push_back({s, true});
  std::stable_sort(all.begin(), all.end(),
                   [](const Tagged& a, const Tagged& b) { return a.score < b.score; });
  // Midrank assignment over tie groups, then the rank-sum identity.
  double rank_sum_out = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].is_out) rank_sum_out += midrank;
    }
    i = j;
  }
  const double n_out = static_cast<double>(scores_out.size());
  const double n_in = static_cast<double>(scores_in.size());
  const double u = rank_sum_out - n_out * (n_out + 1.0) / 2.0;
  return u / (n_in * n_out);
}

/// Two-dimensional entropy x mutual-information histogram, split into
/// correct and incorrect groups, with per-group means and medians.
struct Histogram2D {
  std::vector<double> entropy_edges;  // size bins+1, strictly increasing
  std::vector<double> mi_edges;
  // counts[group][entropy_bin][mi_bin]; group 0 = correct, 1 = incorrect
  std::array<std::vector<std::vector<std::int64_t>>, 2> counts;
  std::array<std::int64_t, 2> group_total{0, 0};
  std::array<double, 2> mean_entropy{0.0, 0.0};
  std::array<double, 2> mean_mi{0.0, 0.0};
  std::array<double, 2> median_entropy{0.0, 0.0};
  std::array<double, 2> median_mi{0.0, 0.0};
};

inline std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins < 1 || !(hi > lo)) {
    throw std::invalid_argument("uniform_edges: need bins >= 1 and hi > lo");
  }
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  return edges;
}

namespace detail {
inline std::size_t locate_bin(const std::vector<double>& edges, double v) {
  // Clamp out-of-range values into the edge bins rather than dropping them.
  const auto it = std::upper_bound(edges.begin(), edges.end(), v);
  const long idx = static_cast<long>(it - edges.begin()) - 1;
  return static_cast<std::size_t>(
      std::clamp(idx, 0L, static_cast<long>(edges.size()) - 2));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

inline Histogram2D histogram2d(const std::vector<UncertaintyRecord>& records,
                               const std::vector<double>& entropy_edges,
                               const std::vector<double>& mi_edges) {
  for (const auto* edges : {&entropy_edges, &mi_edges}) {
    if (edges->size() < 2) {
      throw std::invalid_argument("histogram2d: need at least two edges per axis");
    }
    for (std::size_t i = 1; i < edges->size(); ++i) {
      if (!((*edges)[i] > (*edges)[i - 1])) {
        throw std::invalid_argument("histogram2d: edges must be strictly increasing");
      }
    }
  }
  Histogram2D h;
  h.entropy_edges = entropy_edges;
  h.mi_edges = mi_edges;
  const std::size_t eb = entropy_edges.size() - 1, mb = mi_edges.size() - 1;
  for (int g = 0; g < 2; ++g) {
    h.counts[g].assign(eb, std::vector<std::int64_t>(mb, 0));
  }
  std::array<std::vector<double>, 2> ent_vals, mi_vals;
  for (const auto& r : records) {
    const int g = r.correct ? 0 : 1;
    const std::size_t i = detail::locate_bin(entropy_edges, r.entropy);
    const std::size_t j = detail::locate_bin(mi_edges, r.mutual_information);
    ++h.counts[g][i][j];
    ++h.group_total[g];
    ent_vals[g].push_back(r.entropy);
    mi_vals[g].push_back(r.mutual_information);
  }
  for (int g = 0; g < 2; ++g) {
    const double n = static_cast<double>(h.group_total[g]);
    if (n > 0) {
      double se = 0.0, sm = 0.0;
      for (double v : ent_vals[g]) se += v;
      for (double v : mi_vals[g]) sm += v;
      h.mean_entropy[g] = se / n;
      h.mean_mi[g] = sm / n;
      h.median_entropy[g] = detail::median_of(ent_vals[g]);
      h.median_mi[g] = detail::median_of(mi_vals[g]);
    }
  }
  return h;
}

}  // namespace uq
