#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "styemp/error.hpp"

namespace styemp {

/// Pearson correlation; empty when either side has zero variance or fewer
/// than two points.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const long double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return static_cast<double>(std::clamp(sxy / std::sqrt(sxx * syy), -1.0L, 1.0L));
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("spearman: length mismatch");
  return pearson(average_ranks(x), average_ranks(y));
}

struct ClassificationMetrics {
  double accuracy = 0;
  std::optional<double> balanced_accuracy;  // mean recall over classes present in the gold labels
  std::optional<double> f1;                 // macro F1 over classes seen in gold or predictions
  std::size_t n = 0;
};

inline ClassificationMetrics classification_metrics(const std::vector<int>& gold, const std::vector<int>& pred,
                                                    std::size_t n_classes) {
  if (gold.size() != pred.size()) throw ContractError("classification metrics: length mismatch");
  ClassificationMetrics m;
  m.n = gold.size();
  if (gold.empty()) throw ContractError("classification metrics: empty input");
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0), support(n_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = static_cast<std::size_t>(gold[i]), p = static_cast<std::size_t>(pred[i]);
    if (g >= n_classes || p >= n_classes) throw ContractError("classification metrics: label out of range");
    support[g] += 1;
    if (g == p) {
      ++correct;
      tp[g] += 1;
    } else {
      fp[p] += 1;
      fn[g] += 1;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());
  double recall_sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c)
    if (support[c] > 0) {
      recall_sum += tp[c] / support[c];
      ++present;
    }
  if (present > 0) m.balanced_accuracy = recall_sum / static_cast<double>(present);
  auto f1_of = [&](std::size_t c) -> std::optional<double> {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0) return std::nullopt;
    return 2 * tp[c] / denom;
  };
  double s = 0;
  std::size_t k = 0;
  for (std::size_t c = 0; c < n_classes; ++c)
    if (auto f = f1_of(c)) {
      s += *f;
      ++k;
    }
  if (k > 0) m.f1 = s / static_cast<double>(k);
  return m;
}

/// Distinct-n: unique n-grams over total n-grams across all sequences.
inline double distinct_n(const std::vector<std::vector<int>>& seqs, std::size_t n) {
  if (n == 0) throw ContractError("distinct_n: n must be positive");
  std::set<std::vector<int>> unique;
  std::size_t total = 0;
  for (const auto& s : seqs)
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      unique.insert(std::vector<int>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                     s.begin() + static_cast<std::ptrdiff_t>(i + n)));
      ++total;
    }
  if (total == 0) throw ContractError("distinct_n: every sequence is shorter than n");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// JSON number, or null for an undefined value.
inline nlohmann::json json_or_null(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

inline double value_or_nan(const std::optional<double>& v) {
  return v ? *v : std::numeric_limits<double>::quiet_NaN();
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace styemp
