#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "mhcal/errors.hpp"
#include "mhcal/parameter_space.hpp"

namespace mhcal {

struct BoxplotStats {
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  double lower_whisker = 0.0;
  double upper_whisker = 0.0;

  double whisker_width() const { return upper_whisker - lower_whisker; }
};

/// Quantile by linear interpolation at position p * (n - 1) of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  if (i + 1 >= sorted.size()) return sorted.back();
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

/// Tukey boxplot; whiskers are the extreme data values inside the 1.5 IQR fences.
inline BoxplotStats tukey_boxplot(std::span<const double> values) {
  if (values.size() < 4) throw ArgumentError("tukey_boxplot: need at least 4 values");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  BoxplotStats b;
  b.q1 = quantile_sorted(v, 0.25);
  b.median = quantile_sorted(v, 0.5);
  b.q3 = quantile_sorted(v, 0.75);
  b.iqr = b.q3 - b.q1;
  const double lo_fence = b.q1 - 1.5 * b.iqr;
  const double hi_fence = b.q3 + 1.5 * b.iqr;
  b.lower_whisker = *std::find_if(v.begin(), v.end(), [&](double x) { return x >= lo_fence; });
  b.upper_whisker = *std::find_if(v.rbegin(), v.rend(), [&](double x) { return x <= hi_fence; });
  return b;
}

/// Not converged: whisker spread above 10% of the original range.
inline bool nc_flag(const BoxplotStats& box, const SearchRange& original) {
  return box.whisker_width() > 0.10 * original.width();
}

/// Hit the boundary: median within 1% of a bound, or a whisker at a bound.
inline bool hb_flag(const BoxplotStats& box, const SearchRange& original) {
  const double near = std::min(std::abs(box.median - original.lo), std::abs(box.median - original.hi));
  return near < 0.01 * original.width() || box.lower_whisker <= original.lo ||
         box.upper_whisker >= original.hi;
}

inline double absolute_relative_error(double estimate, double truth) {
  return truth == 0.0 ? std::abs(estimate) : std::abs(estimate - truth) / std::abs(truth);
}

struct RosareResult {
  double ratio = 0.0;
  std::size_t wins = 0;
  std::size_t eligible = 0;
};

/// Share of parameters converged in both configurations on which the new
/// configuration's estimate has the strictly smaller absolute relative error.
inline RosareResult rosare(std::span<const BoxplotStats> new_boxes,
                           std::span<const BoxplotStats> trad_boxes,
                           std::span<const double> new_estimates,
                           std::span<const double> trad_estimates, std::span<const double> truths,
                           std::span<const SearchRange> originals) {
  const std::size_t n = truths.size();
  if (new_boxes.size() != n || trad_boxes.size() != n || new_estimates.size() != n ||
      trad_estimates.size() != n || originals.size() != n)
    throw ArgumentError("rosare: inputs are not aligned");
  RosareResult r;
  for (std::size_t i = 0; i < n; ++i) {
    if (nc_flag(new_boxes[i], originals[i]) || nc_flag(trad_boxes[i], originals[i])) continue;
    ++r.eligible;
    if (absolute_relative_error(new_estimates[i], truths[i]) <
        absolute_relative_error(trad_estimates[i], truths[i]))
      ++r.wins;
  }
  if (r.eligible == 0) throw DomainError("rosare: no parameter converged in both configurations");
  r.ratio = static_cast<double>(r.wins) / static_cast<double>(r.eligible);
  return r;
}

inline double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample variance (n - 1 denominator).
inline double variance(std::span<const double> v) {
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

/// Upper tail of the F(d1, d2) distribution.
inline double f_upper_tail(double f, double d1, double d2) {
  if (!(f > 0.0)) return 1.0;
  const double x = d2 / (d2 + d1 * f);
  return boost::math::ibeta(d2 / 2.0, d1 / 2.0, x);
}

/// Two-sided tail of Student's t with nu degrees of freedom.
inline double t_two_sided(double t, double nu) {
  if (!std::isfinite(t)) return 0.0;
  const double x = nu / (nu + t * t);
  return boost::math::ibeta(nu / 2.0, 0.5, x);
}

struct AnovaResult {
  double f = 0.0;
  double p = 1.0;
  double df_between = 0.0;
  double df_within = 0.0;
};

/// One-way ANOVA. When both mean squares vanish the result is F = 0, p = 1.
inline AnovaResult anova_one_way(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw ArgumentError("anova: need at least 2 groups");
  std::size_t total = 0;
  double grand = 0.0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw ArgumentError("anova: every group needs at least 2 samples");
    total += g.size();
    grand += std::accumulate(g.begin(), g.end(), 0.0);
  }
  grand /= static_cast<double>(total);
  double ssb = 0.0;
  double ssw = 0.0;
  for (const auto& g : groups) {
    const double m = mean(g);
    ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double x : g) ssw += (x - m) * (x - m);
  }
  AnovaResult r;
  r.df_between = static_cast<double>(groups.size() - 1);
  r.df_within = static_cast<double>(total - groups.size());
  const double msb = ssb / r.df_between;
  const double msw = ssw / r.df_within;
  if (msw == 0.0) {
    if (msb == 0.0) return r;
    r.f = std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.f = msb / msw;
  r.p = f_upper_tail(r.f, r.df_between, r.df_within);
  return r;
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

inline TTestResult t_test_one_sample(std::span<const double> values, double mu0) {
  if (values.size() < 2) throw ArgumentError("t-test: need at least 2 values");
  const double var = variance(values);
  if (!(var > 0.0)) throw DomainError("t-test: zero sample variance");
  TTestResult r;
  r.df = static_cast<double>(values.size() - 1);
  r.t = (mean(values) - mu0) / std::sqrt(var / static_cast<double>(values.size()));
  r.p = t_two_sided(r.t, r.df);
  return r;
}

/// Pooled-variance two-sample t statistic (used to cross-check ANOVA).
inline TTestResult t_test_pooled(std::span<const double> a, std::span<const double> b) {
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sp = ((na - 1) * variance(a) + (nb - 1) * variance(b)) / (na + nb - 2);
  TTestResult r;
  r.df = na + nb - 2;
  r.t = (mean(a) - mean(b)) / std::sqrt(sp * (1 / na + 1 / nb));
  r.p = t_two_sided(r.t, r.df);
  return r;
}

/// Welch's unequal-variance two-sample t-test.
inline TTestResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ArgumentError("welch: need at least 2 values per sample");
  const double va = variance(a) / static_cast<double>(a.size());
  const double vb = variance(b) / static_cast<double>(b.size());
  TTestResult r;
  if (va + vb == 0.0) {
    r.t = mean(a) == mean(b) ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(),
                                                    mean(a) - mean(b));
    r.p = mean(a) == mean(b) ? 1.0 : 0.0;
    r.df = static_cast<double>(a.size() + b.size() - 2);
    return r;
  }
  r.t = (mean(a) - mean(b)) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) /
         (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  r.p = t_two_sided(r.t, r.df);
  return r;
}

}  // namespace mhcal
