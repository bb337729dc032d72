#pragma once

// Rank correlation and the report statistics computed over probe outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfp/numerics.hpp"
#include "lfp/probes.hpp"

namespace lfp::analysis {

using probes::DeltaSample;
using probes::Polarity;
using probes::Probe;

struct TauResult {
  double tau = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  std::int64_t concordant = 0;
  std::int64_t discordant = 0;
  std::int64_t ties_x_only = 0;
  std::int64_t ties_y_only = 0;
  std::int64_t ties_both = 0;

  std::int64_t pair_total() const { return concordant + discordant + ties_x_only + ties_y_only + ties_both; }
};

namespace detail {

/// Sorts v[lo, hi) ascending and returns the number of strict inversions.
inline std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<std::int64_t>(mid - i);
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

struct TieStats {
  std::int64_t pairs = 0;  // sum t(t-1)/2
  double v_t = 0.0;        // sum t(t-1)(2t+5)
  double v_1 = 0.0;        // sum t(t-1)
  double v_2 = 0.0;        // sum t(t-1)(t-2)
};

/// Tie statistics over runs of equal values in an already sorted sequence.
template <class Eq>
TieStats tie_stats(std::size_t n, Eq equal_to_prev) {
  TieStats s;
  std::size_t run = 1;
  auto flush = [&] {
    const double t = static_cast<double>(run);
    s.pairs += static_cast<std::int64_t>(run * (run - 1) / 2);
    s.v_t += t * (t - 1) * (2 * t + 5);
    s.v_1 += t * (t - 1);
    s.v_2 += t * (t - 1) * (t - 2);
    run = 1;
  };
  for (std::size_t i = 1; i < n; ++i) {
    if (equal_to_prev(i)) {
      ++run;
    } else {
      flush();
    }
  }
  flush();
  return s;
}

}  // namespace detail

/// Kendall tau-b in O(n log n) (Knight's algorithm). The two-sided p-value uses
/// the normal approximation with the tie-adjusted variance of S = C - D.
/// When either variable is constant the statistic is undefined; tau = 0 and p = 1.
inline TauResult kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("kendall_tau: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("kendall_tau: need at least 2 observations");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw std::invalid_argument("kendall_tau: non-finite value");
  }
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[idx[i]];
    ys[i] = y[idx[i]];
  }
  const auto tx = detail::tie_stats(n, [&](std::size_t i) { return xs[i] == xs[i - 1]; });
  const auto txy = detail::tie_stats(n, [&](std::size_t i) { return xs[i] == xs[i - 1] && ys[i] == ys[i - 1]; });
  std::vector<double> buf(n);
  const std::int64_t swaps = detail::merge_count(ys, buf, 0, n);
  const auto ty = detail::tie_stats(n, [&](std::size_t i) { return ys[i] == ys[i - 1]; });

  const auto n0 = static_cast<std::int64_t>(n * (n - 1) / 2);
  TauResult r;
  r.n = n;
  r.discordant = swaps;
  r.ties_both = txy.pairs;
  r.ties_x_only = tx.pairs - txy.pairs;
  r.ties_y_only = ty.pairs - txy.pairs;
  r.concordant = n0 - tx.pairs - ty.pairs + txy.pairs - swaps;

  const double s = static_cast<double>(r.concordant - r.discordant);
  const double denom = std::sqrt(static_cast<double>(n0 - tx.pairs) * static_cast<double>(n0 - ty.pairs));
  if (!(denom > 0.0)) {
    r.tau = 0.0;
    r.p_value = 1.0;
    return r;
  }
  r.tau = std::clamp(s / denom, -1.0, 1.0);

  const double nd = static_cast<double>(n);
  const double v0 = nd * (nd - 1) * (2 * nd + 5);
  const double v1 = tx.v_1 * ty.v_1 / (2 * nd * (nd - 1));
  const double v2 = n > 2 ? tx.v_2 * ty.v_2 / (9 * nd * (nd - 1) * (nd - 2)) : 0.0;
  const double var = (v0 - tx.v_t - ty.v_t) / 18.0 + v1 + v2;
  r.p_value = var > 0.0 ? std::clamp(std::erfc(std::abs(s) / std::sqrt(var) / std::sqrt(2.0)), 0.0, 1.0) : 1.0;
  return r;
}

/// Exact two-sided permutation p-value for S = C - D: the fraction of orderings
/// of y whose |S| is at least the observed |S|. Without ties the null
/// distribution of inversions is computed directly; with ties all n!
/// permutations are enumerated, so n is limited to 10.
inline double kendall_tau_exact_p(const std::vector<double>& x, const std::vector<double>& y) {
  const auto obs = kendall_tau(x, y);
  const std::int64_t s_obs = std::llabs(obs.concordant - obs.discordant);
  const std::size_t n = x.size();
  const bool ties = obs.ties_x_only + obs.ties_y_only + obs.ties_both > 0;
  if (!ties) {
    if (n > 60) throw std::invalid_argument("kendall_tau_exact_p: n > 60");
    const std::size_t max_inv = n * (n - 1) / 2;
    std::vector<double> dist(max_inv + 1, 0.0);
    dist[0] = 1.0;
    for (std::size_t k = 2; k <= n; ++k) {
      std::vector<double> next(max_inv + 1, 0.0);
      for (std::size_t inv = 0; inv <= max_inv; ++inv) {
        if (dist[inv] == 0.0) continue;
        for (std::size_t add = 0; add < k && inv + add <= max_inv; ++add) next[inv + add] += dist[inv];
      }
      dist = std::move(next);
    }
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    double tail = 0.0;
    for (std::size_t inv = 0; inv <= max_inv; ++inv) {
      const std::int64_t s = static_cast<std::int64_t>(max_inv) - 2 * static_cast<std::int64_t>(inv);
      if (std::llabs(s) >= s_obs) tail += dist[inv];
    }
    return std::min(1.0, tail / total);
  }
  if (n > 10) throw std::invalid_argument("kendall_tau_exact_p: tied data limited to n <= 10");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::int64_t hits = 0, total = 0;
  do {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = x[i] - x[j];
        const double dy = y[perm[i]] - y[perm[j]];
        s += (dx * dy > 0) - (dx * dy < 0);
      }
    }
    hits += std::llabs(s) >= s_obs ? 1 : 0;
    ++total;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------

struct SignAccuracy {
  double positive = 0.0;  // NaN when no positive truth values
  double negative = 0.0;  // NaN when no negative truth values
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
  std::size_t excluded_zero = 0;
};

inline SignAccuracy sign_accuracy(const std::vector<double>& predicted, const std::vector<double>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("sign_accuracy: length mismatch");
  SignAccuracy r;
  std::size_t pos_hits = 0, neg_hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] > 0) {
      ++r.n_positive;
      pos_hits += predicted[i] > 0 ? 1 : 0;
    } else if (truth[i] < 0) {
      ++r.n_negative;
      neg_hits += predicted[i] < 0 ? 1 : 0;
    } else {
      ++r.excluded_zero;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.positive = r.n_positive ? static_cast<double>(pos_hits) / static_cast<double>(r.n_positive) : nan;
  r.negative = r.n_negative ? static_cast<double>(neg_hits) / static_cast<double>(r.n_negative) : nan;
  return r;
}

/// kendall_tau over the entries whose truth has the requested sign.
inline TauResult polarity_restricted_tau(const std::vector<double>& predicted, const std::vector<double>& truth,
                                         Polarity polarity) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("polarity_restricted_tau: length mismatch");
  std::vector<double> p, t;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if ((polarity == Polarity::positive && truth[i] > 0) || (polarity == Polarity::negative && truth[i] < 0)) {
      p.push_back(predicted[i]);
      t.push_back(truth[i]);
    }
  }
  if (p.size() < 2) {
    throw std::invalid_argument(std::string("polarity_restricted_tau: insufficient entries of polarity ") +
                                probes::to_string(polarity) + " (" + std::to_string(p.size()) + ")");
  }
  return kendall_tau(p, t);
}

// ---------------------------------------------------------------------------

struct FrequencyErrorRow {
  std::string token;
  double frequency = 0.0;  // fraction of generations containing the token
  double abs_error = 0.0;
};

struct FrequencyErrorReport {
  std::vector<FrequencyErrorRow> rows;
  TauResult tau;

  std::string csv() const {
    std::ostringstream out;
    out.precision(10);
    out << "token,frequency,abs_error\n";
    for (const auto& r : rows) out << r.token << ',' << r.frequency << ',' << r.abs_error << '\n';
    return out.str();
  }
};

inline FrequencyErrorReport frequency_vs_error(const std::vector<std::string>& tokens,
                                               const std::vector<double>& abs_errors,
                                               const std::vector<std::vector<std::string>>& generations) {
  if (tokens.size() != abs_errors.size()) throw std::invalid_argument("frequency_vs_error: length mismatch");
  if (generations.empty()) throw std::invalid_argument("frequency_vs_error: empty generation corpus");
  std::map<std::string, std::size_t> containing;
  for (const auto& g : generations) {
    const std::set<std::string> uniq(g.begin(), g.end());
    for (const auto& w : uniq) ++containing[w];
  }
  FrequencyErrorReport rep;
  std::vector<double> f, e;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto it = containing.find(tokens[i]);
    const double freq = it == containing.end() ? 0.0
                                               : static_cast<double>(it->second) / static_cast<double>(generations.size());
    rep.rows.push_back({tokens[i], freq, abs_errors[i]});
    f.push_back(freq);
    e.push_back(abs_errors[i]);
  }
  if (tokens.size() >= 2) rep.tau = kendall_tau(f, e);
  return rep;
}

// ---------------------------------------------------------------------------

struct FeatureFrequency {
  std::vector<double> per_feature;  // aligned with the requested indices
  double mean_selected = 0.0;
  double average_all = 0.0;  // mean over every feature dimension
  std::size_t qualifying = 0;
};

/// Over samples whose probe prediction exceeds `threshold`, the fraction in
/// which each listed feature is strictly positive.
inline FeatureFrequency strong_positive_feature_frequency(const std::vector<DeltaSample>& samples, const Probe& probe,
                                                          const std::vector<int>& feature_indices, double threshold) {
  std::vector<const DeltaSample*> q;
  for (const auto& s : samples) {
    if (probes::predict(probe, s.features) > threshold) q.push_back(&s);
  }
  if (q.empty()) {
    throw std::domain_error("strong_positive_feature_frequency: no samples above threshold " +
                            std::to_string(threshold) + " (0 of " + std::to_string(samples.size()) + ")");
  }
  const Eigen::Index d = q.front()->features.size();
  Vector active = Vector::Zero(d);
  for (const auto* s : q) active += (s->features.array() > 0.0).cast<double>().matrix();
  active /= static_cast<double>(q.size());
  FeatureFrequency r;
  r.qualifying = q.size();
  for (int i : feature_indices) {
    if (i < 0 || i >= d) throw std::out_of_range("strong_positive_feature_frequency: feature index " + std::to_string(i));
    r.per_feature.push_back(active(i));
  }
  if (!r.per_feature.empty()) {
    r.mean_selected = std::accumulate(r.per_feature.begin(), r.per_feature.end(), 0.0) /
                      static_cast<double>(r.per_feature.size());
  }
  r.average_all = active.mean();
  return r;
}

// ---------------------------------------------------------------------------

struct PcaSeparability {
  std::vector<double> explained_variance_ratio;
  Matrix projection;  // m x k, k = min(2, dims)
  std::vector<Polarity> polarity;

  std::string csv() const {
    std::ostringstream out;
    out.precision(10);
    out << "pc1,pc2,polarity\n";
    for (Eigen::Index i = 0; i < projection.rows(); ++i) {
      out << projection(i, 0) << ',' << (projection.cols() > 1 ? projection(i, 1) : 0.0) << ','
          << probes::to_string(polarity[static_cast<std::size_t>(i)]) << '\n';
    }
    return out.str();
  }
};

inline PcaSeparability pca_separability(const std::vector<DeltaSample>& samples) {
  if (samples.size() < 2) throw std::invalid_argument("pca_separability: need at least 2 samples");
  const Matrix x = probes::feature_matrix(samples);
  const Eigen::Index k = std::min<Eigen::Index>({2, x.rows(), x.cols()});
  const auto p = numerics::pca(x, k);
  PcaSeparability r;
  r.explained_variance_ratio = p.explained_variance_ratio;
  r.projection = p.project(x);
  for (const auto& s : samples) r.polarity.push_back(s.polarity);
  return r;
}

// ---------------------------------------------------------------------------

struct FeatureRef {
  int layer = 0;
  int feature = 0;
  int concat_index = 0;
  double score = 0.0;
};

/// Top-k concatenated dimensions by mean contribution w_i * c_i over the
/// positive samples, mapped back to (layer, feature) through the layer widths.
inline std::vector<FeatureRef> reward_correlated_features(const Probe& probe, const std::vector<DeltaSample>& samples,
                                                          const std::vector<int>& layers,
                                                          const std::vector<int>& layer_widths, int k) {
  if (layers.size() != layer_widths.size()) throw std::invalid_argument("reward_correlated_features: layer list mismatch");
  const Eigen::Index d = probe.weights.size();
  if (std::accumulate(layer_widths.begin(), layer_widths.end(), 0) != d) {
    throw std::invalid_argument("reward_correlated_features: layer widths do not sum to the probe width");
  }
  if (k < 0 || k > d) throw std::invalid_argument("reward_correlated_features: k out of range");
  Vector mean_pos = Vector::Zero(d);
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.polarity != Polarity::positive) continue;
    mean_pos += s.features;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("reward_correlated_features: no positive samples");
  const Vector score = probe.weights.cwiseProduct(mean_pos / static_cast<double>(n));
  std::vector<int> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score(a) > score(b); });
  std::vector<FeatureRef> out;
  for (int r = 0; r < k; ++r) {
    int idx = order[static_cast<std::size_t>(r)];
    FeatureRef f;
    f.concat_index = idx;
    f.score = score(idx);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (idx < layer_widths[l]) {
        f.layer = layers[l];
        f.feature = idx;
        break;
      }
      idx -= layer_widths[l];
    }
    out.push_back(f);
  }
  return out;
}

/// An untrained linear probe: Xavier-initialized weights, zero bias.
inline Probe xavier_baseline_probe(Eigen::Index dim, std::uint64_t seed) {
  Probe p;
  p.kind = probes::ProbeKind::linear;
  const Matrix w = numerics::xavier_init(1, dim, seed);
  p.weights = w.row(0).transpose();
  p.training = {{"baseline", "xavier"}, {"seed", seed}};
  return p;
}

inline nlohmann::json to_json(const TauResult& t) {
  return {{"tau", t.tau},
          {"p_value", t.p_value},
          {"n", t.n},
          {"concordant", t.concordant},
          {"discordant", t.discordant},
          {"ties_x_only", t.ties_x_only},
          {"ties_y_only", t.ties_y_only},
          {"ties_both", t.ties_both}};
}

inline nlohmann::json to_json(const SignAccuracy& s) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"positive", num(s.positive)},
          {"negative", num(s.negative)},
          {"n_positive", s.n_positive},
          {"n_negative", s.n_negative},
          {"excluded_zero", s.excluded_zero}};
}

}  // namespace lfp::analysis
