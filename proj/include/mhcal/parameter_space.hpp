#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mhcal/errors.hpp"
#include "mhcal/random.hpp"

namespace mhcal {

enum class Scale { Linear, Log10 };
enum class Direction { ToSearch, ToModel };

inline const char* to_string(Scale s) { return s == Scale::Linear ? "linear" : "log10"; }

/// One calibratable parameter. Bounds and truth are in model units.
struct ParameterSpec {
  std::string name;
  double low = 0.0;
  double high = 1.0;
  Scale scale = Scale::Linear;
  int group = 1;
  std::optional<double> truth;

  bool operator==(const ParameterSpec&) const = default;
};

/// Closed interval in search scale.
struct SearchRange {
  double lo = 0.0;
  double hi = 0.0;

  double width() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  bool operator==(const SearchRange&) const = default;
};

/// Resolution of a group within a run: full range, shrunk range, or k interior points.
struct ResolutionMode {
  enum class Kind { Full, Shrunk, Discrete };
  Kind kind = Kind::Full;
  int points = 0;

  static ResolutionMode full() { return {Kind::Full, 0}; }
  static ResolutionMode shrunk() { return {Kind::Shrunk, 0}; }
  static ResolutionMode discrete(int k) {
    if (k < 2) throw ArgumentError("discrete resolution needs at least 2 points");
    return {Kind::Discrete, k};
  }

  bool is_discrete() const { return kind == Kind::Discrete; }
  bool is_continuous() const { return kind != Kind::Discrete; }
  bool operator==(const ResolutionMode&) const = default;
};

inline std::string to_string(const ResolutionMode& m) {
  switch (m.kind) {
    case ResolutionMode::Kind::Full: return "full";
    case ResolutionMode::Kind::Shrunk: return "shrunk";
    case ResolutionMode::Kind::Discrete: return std::to_string(m.points);
  }
  return "?";
}

inline double apply_scale(const ParameterSpec& spec, double value, Direction dir) {
  if (spec.scale == Scale::Linear) return value;
  if (dir == Direction::ToSearch) {
    if (!(value > 0.0))
      throw DomainError("log10 scale needs a positive value for parameter '" + spec.name + "'");
    return std::log10(value);
  }
  return std::pow(10.0, value);
}

/// Original bounds of a parameter expressed in search scale.
inline SearchRange original_range(const ParameterSpec& spec) {
  return {apply_scale(spec, spec.low, Direction::ToSearch),
          apply_scale(spec, spec.high, Direction::ToSearch)};
}

inline void validate_spec(const ParameterSpec& spec) {
  if (!(spec.low < spec.high))
    throw ArgumentError("parameter '" + spec.name + "': low must be < high");
  if (spec.scale == Scale::Log10 && !(spec.low > 0.0))
    throw ArgumentError("parameter '" + spec.name + "': log10 scale needs low > 0");
  if (spec.truth && !std::isfinite(*spec.truth))
    throw ArgumentError("parameter '" + spec.name + "': truth must be finite");
}

/// k interior points lo + (hi - lo) * i / (k + 1), i = 1..k.
inline std::vector<double> discrete_points(const SearchRange& range, int k) {
  if (k < 2) throw ArgumentError("discrete_points: k must be >= 2");
  std::vector<double> pts(static_cast<std::size_t>(k));
  for (int i = 1; i <= k; ++i)
    pts[static_cast<std::size_t>(i - 1)] =
        range.lo + range.width() * static_cast<double>(i) / static_cast<double>(k + 1);
  return pts;
}

/// Nearest of the given points; ties resolve to the lower one.
inline double snap_to_points(double value, std::span<const double> points) {
  double best = points.front();
  double best_d = std::abs(value - best);
  for (double p : points.subspan(1)) {
    const double d = std::abs(value - p);
    if (d < best_d) {
      best = p;
      best_d = d;
    }
  }
  return best;
}

/// Range update mean +/- w * sd, clipped to the parameter's original bounds.
/// Samples are in search scale; sd uses the n-1 denominator (0 for a single sample).
inline SearchRange shrink_range(const ParameterSpec& spec, std::span<const double> samples,
                                double w) {
  if (samples.empty()) throw ArgumentError("shrink_range: no samples");
  if (!(w > 0.0)) throw ArgumentError("shrink_range: w must be positive");
  const double n = static_cast<double>(samples.size());
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double sd = 0.0;
  if (samples.size() > 1) {
    double ss = 0.0;
    for (double s : samples) ss += (s - mean) * (s - mean);
    sd = std::sqrt(ss / (n - 1.0));
  }
  const SearchRange bounds = original_range(spec);
  SearchRange r{std::max(bounds.lo, mean - w * sd), std::min(bounds.hi, mean + w * sd)};
  // samples outside the original bounds
  if (r.lo > r.hi) r.lo = r.hi = std::clamp(mean, bounds.lo, bounds.hi);
  return r;
}

inline double sample_assignment(const ParameterSpec& /*spec*/, const SearchRange& range,
                                const ResolutionMode& mode, Rng& rng) {
  if (mode.is_discrete()) {
    const auto pts = discrete_points(range, mode.points);
    return pts[rng.index(pts.size())];
  }
  if (range.lo == range.hi) return range.lo;
  return rng.uniform(range.lo, range.hi);
}

/// Ordered collection of parameters with a group count.
class ParameterSpace {
 public:
  ParameterSpace() = default;
  ParameterSpace(std::vector<ParameterSpec> params, int groups)
      : params_(std::move(params)), groups_(groups) {
    validate();
  }

  std::size_t size() const { return params_.size(); }
  int groups() const { return groups_; }
  const ParameterSpec& operator[](std::size_t i) const { return params_[i]; }
  const std::vector<ParameterSpec>& params() const { return params_; }

  std::vector<SearchRange> original_ranges() const {
    std::vector<SearchRange> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(original_range(p));
    return out;
  }

  /// Number of parameters in each group, index 0 = group 1.
  std::vector<std::size_t> group_sizes() const {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(groups_), 0);
    for (const auto& p : params_) ++sizes[static_cast<std::size_t>(p.group - 1)];
    return sizes;
  }

  /// Copy with group indices replaced.
  ParameterSpace regrouped(std::span<const int> groups, int group_count) const {
    if (groups.size() != params_.size())
      throw ArgumentError("regrouped: group vector length mismatch");
    auto copy = params_;
    for (std::size_t i = 0; i < copy.size(); ++i) copy[i].group = groups[i];
    return ParameterSpace(std::move(copy), group_count);
  }

  std::vector<double> to_model(std::span<const double> search) const {
    std::vector<double> out(search.size());
    for (std::size_t i = 0; i < search.size(); ++i)
      out[i] = apply_scale(params_[i], search[i], Direction::ToModel);
    return out;
  }

  std::vector<double> to_search(std::span<const double> model) const {
    std::vector<double> out(model.size());
    for (std::size_t i = 0; i < model.size(); ++i)
      out[i] = apply_scale(params_[i], model[i], Direction::ToSearch);
    return out;
  }

  bool operator==(const ParameterSpace&) const = default;

 private:
  void validate() const {
    if (groups_ < 1) throw ArgumentError("parameter space needs at least one group");
    for (const auto& p : params_) {
      validate_spec(p);
      if (p.group < 1 || p.group > groups_)
        throw ArgumentError("parameter '" + p.name + "': group " + std::to_string(p.group) +
                            " outside [1, " + std::to_string(groups_) + "]");
    }
  }

  std::vector<ParameterSpec> params_;
  int groups_ = 1;
};

}  // namespace mhcal
