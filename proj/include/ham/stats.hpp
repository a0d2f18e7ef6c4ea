#pragma once

// Paired significance testing and confidence intervals over repeated runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "ham/error.hpp"

namespace ham {

enum class Alternative { TwoSided, Greater };

struct WilcoxonResult {
  std::size_t n = 0;          // nonzero differences
  double w = 0.0;             // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  std::optional<double> p;    // empty when there is too little data
  bool exact = false;

  bool sufficient() const { return p.has_value(); }
};

// Average ranks (1-based) of the values, ties sharing the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace detail {

// Number of sign assignments whose positive rank sum equals s, for every s.
// Ranks are doubled so tied half-integer ranks stay integral.
inline std::vector<double> signed_rank_counts(const std::vector<double>& ranks) {
  std::size_t total = 0;
  std::vector<std::size_t> twice;
  for (double r : ranks) {
    twice.push_back(static_cast<std::size_t>(std::llround(2.0 * r)));
    total += twice.back();
  }
  std::vector<double> counts(total + 1, 0.0);
  counts[0] = 1.0;
  for (std::size_t r : twice)
    for (std::size_t s = total + 1; s-- > r;) counts[s] += counts[s - r];
  return counts;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace detail

inline constexpr std::size_t kWilcoxonExactLimit = 12;
inline constexpr std::size_t kWilcoxonMinPairs = 5;

// Paired signed-rank test on d = a - b. Zero differences are dropped; ties
// get average ranks. Exact null distribution for n <= 12, otherwise the
// normal approximation with tie-corrected variance and continuity correction.
// Greater tests the alternative that a tends to exceed b.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                           Alternative alt = Alternative::TwoSided) {
  if (a.size() != b.size()) throw ShapeError("wilcoxon: paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  WilcoxonResult r;
  r.n = d.size();
  std::vector<double> mag;
  for (double v : d) mag.push_back(std::abs(v));
  const auto ranks = average_ranks(mag);
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];
  r.w = std::min(r.w_plus, r.w_minus);
  if (r.n < kWilcoxonMinPairs) return r;

  const double n = static_cast<double>(r.n);
  if (r.n <= kWilcoxonExactLimit) {
    r.exact = true;
    const auto counts = detail::signed_rank_counts(ranks);
    const double all = std::ldexp(1.0, static_cast<int>(r.n));
    const auto bound = [](double w) { return static_cast<std::size_t>(std::llround(2.0 * w)); };
    double tail = 0.0;
    if (alt == Alternative::TwoSided) {
      for (std::size_t s = 0; s <= bound(r.w) && s < counts.size(); ++s) tail += counts[s];
      r.p = std::min(1.0, 2.0 * tail / all);
    } else {
      for (std::size_t s = bound(r.w_plus); s < counts.size(); ++s) tail += counts[s];
      r.p = tail / all;
    }
    return r;
  }

  const double mean = n * (n + 1) / 4.0;
  double tie = 0.0;
  {
    std::vector<double> sorted = mag;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i);
      tie += t * t * t - t;
      i = j;
    }
  }
  const double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie / 48.0;
  const double sd = std::sqrt(var);
  if (alt == Alternative::TwoSided) {
    const double z = std::max(0.0, (std::abs(r.w_plus - mean) - 0.5) / sd);
    r.p = std::min(1.0, 2.0 * (1.0 - detail::normal_cdf(z)));
  } else {
    const double z = (r.w_plus - mean - 0.5) / sd;
    r.p = 1.0 - detail::normal_cdf(z);
  }
  return r;
}

struct ConfidenceInterval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Student-t interval: mean +- t_{n-1, (1+level)/2} * s / sqrt(n).
inline ConfidenceInterval confidence_interval(const std::vector<double>& values, double level = 0.95) {
  if (values.size() < 2) throw ConfigError("confidence_interval: needs at least two values");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("confidence_interval: level must lie in (0,1)");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  const boost::math::students_t dist(n - 1);
  const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
  const double half = t * sd / std::sqrt(n);
  return {mean, mean - half, mean + half};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace ham
