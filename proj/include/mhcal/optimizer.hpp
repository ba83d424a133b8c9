#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mhcal/errors.hpp"
#include "mhcal/parameter_space.hpp"
#include "mhcal/random.hpp"
#include "mhcal/run_plan.hpp"

namespace mhcal {

enum class Provenance { RandomInit, Carryover, NsgaOffspring, AcoMhOffspring };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::RandomInit: return "random";
    case Provenance::Carryover: return "carryover";
    case Provenance::NsgaOffspring: return "nsga2";
    case Provenance::AcoMhOffspring: return "aco-mh";
  }
  return "?";
}

struct Candidate {
  std::vector<double> assignment;  // search scale
  std::optional<std::vector<double>> objectives;
  Provenance provenance = Provenance::RandomInit;

  bool evaluated() const { return objectives.has_value(); }
  double primary() const { return objectives->front(); }
};

using Objectives = std::vector<double>;

struct Population {
  std::vector<Candidate> members;

  std::size_t size() const { return members.size(); }
  bool fully_evaluated() const {
    return std::all_of(members.begin(), members.end(),
                       [](const Candidate& c) { return c.evaluated(); });
  }
  std::vector<Objectives> objective_vectors() const {
    std::vector<Objectives> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(*m.objectives);
    return out;
  }
  /// Values of parameter i across members.
  std::vector<double> column(std::size_t i) const {
    std::vector<double> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(m.assignment[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Per-run search layout

struct Dimension {
  SearchRange range;
  ResolutionMode mode;
  std::vector<double> points;  // discrete points, empty for continuous dims
};

/// Range, resolution and discrete points of every parameter for one run.
class SearchLayout {
 public:
  SearchLayout() = default;

  SearchLayout(const ParameterSpace& space, std::span<const SearchRange> ranges,
               std::span<const ResolutionMode> group_modes) {
    if (ranges.size() != space.size()) throw ArgumentError("layout: range count mismatch");
    if (static_cast<int>(group_modes.size()) != space.groups())
      throw ArgumentError("layout: group mode count mismatch");
    dims_.reserve(space.size());
    for (std::size_t i = 0; i < space.size(); ++i) {
      Dimension d;
      d.range = ranges[i];
      d.mode = group_modes[static_cast<std::size_t>(space[i].group - 1)];
      if (d.mode.is_discrete()) d.points = discrete_points(d.range, d.mode.points);
      dims_.push_back(std::move(d));
    }
  }

  explicit SearchLayout(std::vector<Dimension> dims) : dims_(std::move(dims)) {}

  std::size_t size() const { return dims_.size(); }
  const Dimension& operator[](std::size_t i) const { return dims_[i]; }
  const std::vector<Dimension>& dims() const { return dims_; }

  std::size_t continuous_count() const {
    return static_cast<std::size_t>(std::count_if(
        dims_.begin(), dims_.end(), [](const Dimension& d) { return d.mode.is_continuous(); }));
  }

  /// Clamp continuous components into range; snap discrete ones to the nearest point.
  double project(std::size_t i, double v) const {
    const auto& d = dims_[i];
    if (d.mode.is_discrete()) return snap_to_points(v, d.points);
    return std::clamp(v, d.range.lo, d.range.hi);
  }

  bool admits(std::size_t i, double v) const {
    const auto& d = dims_[i];
    if (d.mode.is_discrete())
      return std::find(d.points.begin(), d.points.end(), v) != d.points.end();
    return d.range.contains(v);
  }

  bool admits(std::span<const double> assignment) const {
    if (assignment.size() != dims_.size()) return false;
    for (std::size_t i = 0; i < dims_.size(); ++i)
      if (!admits(i, assignment[i])) return false;
    return true;
  }

  double sample(std::size_t i, Rng& rng) const {
    const auto& d = dims_[i];
    if (d.mode.is_discrete()) return d.points[rng.index(d.points.size())];
    if (d.range.lo == d.range.hi) return d.range.lo;
    return rng.uniform(d.range.lo, d.range.hi);
  }

  std::vector<double> sample(Rng& rng) const {
    std::vector<double> out(dims_.size());
    for (std::size_t i = 0; i < dims_.size(); ++i) out[i] = sample(i, rng);
    return out;
  }

 private:
  std::vector<Dimension> dims_;
};

// ---------------------------------------------------------------------------
// Pareto machinery

inline bool dominates(std::span<const double> a, std::span<const double> b) {
  bool strictly = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k] > b[k]) return false;
    if (a[k] < b[k]) strictly = true;
  }
  return strictly;
}

/// Fast nondominated sort (minimization). Front members are listed by ascending index.
inline std::vector<std::vector<std::size_t>> nondominated_sort(std::span<const Objectives> objs) {
  const std::size_t n = objs.size();
  std::vector<std::vector<std::size_t>> fronts;
  if (n == 0) return fronts;
  const std::size_t m = objs[0].size();
  for (const auto& o : objs)
    if (o.size() != m) throw ArgumentError("nondominated_sort: mixed objective dimensionality");

  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> counter(n, 0);
  std::vector<std::size_t> current;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      if (dominates(objs[p], objs[q])) {
        dominated[p].push_back(q);
        ++counter[q];
      } else if (dominates(objs[q], objs[p])) {
        dominated[q].push_back(p);
        ++counter[p];
      }
    }
  }
  for (std::size_t p = 0; p < n; ++p)
    if (counter[p] == 0) current.push_back(p);
  while (!current.empty()) {
    std::vector<std::size_t> next;
    for (std::size_t p : current)
      for (std::size_t q : dominated[p])
        if (--counter[q] == 0) next.push_back(q);
    std::sort(next.begin(), next.end());
    fronts.push_back(std::move(current));
    current = std::move(next);
  }
  return fronts;
}

/// Crowding distance of each member of one front. Boundary members are infinite;
/// objectives that are constant over the front contribute nothing.
inline std::vector<double> crowding_distance(std::span<const Objectives> front) {
  const std::size_t n = front.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(n, 0.0);
  if (n == 0) return dist;
  if (n <= 2) {
    std::fill(dist.begin(), dist.end(), inf);
    return dist;
  }
  const std::size_t m = front[0].size();
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < m; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return front[a][k] < front[b][k]; });
    const double lo = front[order.front()][k];
    const double hi = front[order.back()][k];
    dist[order.front()] = inf;
    dist[order.back()] = inf;
    if (!(hi > lo)) continue;
    for (std::size_t j = 1; j + 1 < n; ++j)
      dist[order[j]] += (front[order[j + 1]][k] - front[order[j - 1]][k]) / (hi - lo);
  }
  return dist;
}

/// Front rank and crowding distance of every member.
struct Ranking {
  std::vector<std::size_t> rank;
  std::vector<double> crowding;

  /// Crowded-comparison order: lower rank, then larger crowding distance.
  bool better(std::size_t a, std::size_t b) const {
    if (rank[a] != rank[b]) return rank[a] < rank[b];
    return crowding[a] > crowding[b];
  }
};

inline Ranking rank_objectives(std::span<const Objectives> objs) {
  Ranking r;
  r.rank.assign(objs.size(), 0);
  r.crowding.assign(objs.size(), 0.0);
  const auto fronts = nondominated_sort(objs);
  std::vector<Objectives> fobjs;
  for (std::size_t f = 0; f < fronts.size(); ++f) {
    fobjs.clear();
    for (std::size_t i : fronts[f]) fobjs.push_back(objs[i]);
    const auto cd = crowding_distance(fobjs);
    for (std::size_t j = 0; j < fronts[f].size(); ++j) {
      r.rank[fronts[f][j]] = f;
      r.crowding[fronts[f][j]] = cd[j];
    }
  }
  return r;
}

/// Indices of all members in crowded-comparison order; ties go to the better
/// primary objective, then the lower index.
inline std::vector<std::size_t> crowded_order(std::span<const Objectives> objs) {
  const Ranking r = rank_objectives(objs);
  std::vector<std::size_t> order(objs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (r.rank[a] != r.rank[b]) return r.rank[a] < r.rank[b];
    if (r.crowding[a] != r.crowding[b]) return r.crowding[a] > r.crowding[b];
    return objs[a][0] < objs[b][0];
  });
  return order;
}

/// Elitist NSGA-II truncation: indices of the n survivors.
inline std::vector<std::size_t> environmental_select(std::span<const Objectives> objs,
                                                     std::size_t n) {
  auto order = crowded_order(objs);
  if (order.size() > n) order.resize(n);
  return order;
}

// ---------------------------------------------------------------------------
// Low-level metaheuristics

struct Nsga2Settings {
  double crossover_rate = 0.9;
  double crossover_eta = 15.0;
  double mutation_rate = -1.0;  // per component; negative means 1 / dimension
  double mutation_eta = 20.0;
};

namespace detail {

inline double sbx_beta_q(double beta, double eta, double u) {
  const double alpha = 2.0 - std::pow(beta, -(eta + 1.0));
  if (u <= 1.0 / alpha) return std::pow(u * alpha, 1.0 / (eta + 1.0));
  return std::pow(1.0 / (2.0 - u * alpha), 1.0 / (eta + 1.0));
}

/// Bounded simulated binary crossover of one component.
inline void sbx(double& a, double& b, double lo, double hi, double eta, Rng& rng) {
  if (std::abs(a - b) <= 1e-14 || !(hi > lo)) return;
  const double y1 = std::min(a, b);
  const double y2 = std::max(a, b);
  const double u = rng.uniform01();
  const double bq1 = sbx_beta_q(1.0 + 2.0 * (y1 - lo) / (y2 - y1), eta, u);
  const double bq2 = sbx_beta_q(1.0 + 2.0 * (hi - y2) / (y2 - y1), eta, u);
  double c1 = std::clamp(0.5 * ((y1 + y2) - bq1 * (y2 - y1)), lo, hi);
  double c2 = std::clamp(0.5 * ((y1 + y2) + bq2 * (y2 - y1)), lo, hi);
  if (rng.bernoulli(0.5)) std::swap(c1, c2);
  a = c1;
  b = c2;
}

/// Bounded polynomial mutation of one component.
inline double polynomial_mutation(double y, double lo, double hi, double eta, Rng& rng) {
  if (!(hi > lo)) return lo;
  const double d1 = (y - lo) / (hi - lo);
  const double d2 = (hi - y) / (hi - lo);
  const double u = rng.uniform01();
  const double p = 1.0 / (eta + 1.0);
  double dq;
  if (u < 0.5) {
    const double v = 2.0 * u + (1.0 - 2.0 * u) * std::pow(1.0 - d1, eta + 1.0);
    dq = std::pow(v, p) - 1.0;
  } else {
    const double v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * std::pow(1.0 - d2, eta + 1.0);
    dq = 1.0 - std::pow(v, p);
  }
  return std::clamp(y + dq * (hi - lo), lo, hi);
}

/// Folds v back into [lo, hi] by reflection at the bounds.
inline double reflect(double v, double lo, double hi) {
  if (!(hi > lo)) return lo;
  const double w = hi - lo;
  double t = std::fmod(v - lo, 2.0 * w);
  if (t < 0) t += 2.0 * w;
  return t <= w ? lo + t : hi - (t - w);
}

inline void require_evaluated(const Population& pop, const char* who) {
  if (pop.members.empty()) throw StateError(std::string(who) + ": empty population");
  if (!pop.fully_evaluated()) throw StateError(std::string(who) + ": population not evaluated");
}

}  // namespace detail

inline std::vector<Candidate> generate_offspring_nsga2(const Population& pop,
                                                       const SearchLayout& layout,
                                                       std::size_t count, Rng& rng,
                                                       const Nsga2Settings& settings = {}) {
  std::vector<Candidate> out;
  if (count == 0) return out;
  detail::require_evaluated(pop, "nsga2");
  const auto objs = pop.objective_vectors();
  const Ranking ranking = rank_objectives(objs);
  const std::size_t n = pop.size();
  const std::size_t dim = layout.size();
  const double pm =
      settings.mutation_rate < 0.0 ? 1.0 / static_cast<double>(std::max<std::size_t>(dim, 1))
                                   : settings.mutation_rate;

  auto tournament = [&]() {
    const std::size_t a = rng.index(n);
    const std::size_t b = rng.index(n);
    return ranking.better(b, a) ? b : a;
  };
  auto mutate = [&](std::vector<double>& x) {
    for (std::size_t i = 0; i < dim; ++i) {
      if (!rng.bernoulli(pm)) continue;
      const auto& d = layout[i];
      if (d.mode.is_discrete())
        x[i] = d.points[rng.index(d.points.size())];
      else
        x[i] = detail::polynomial_mutation(x[i], d.range.lo, d.range.hi, settings.mutation_eta,
                                           rng);
    }
  };

  out.reserve(count);
  while (out.size() < count) {
    auto c1 = pop.members[tournament()].assignment;
    auto c2 = pop.members[tournament()].assignment;
    if (rng.bernoulli(settings.crossover_rate)) {
      for (std::size_t i = 0; i < dim; ++i) {
        if (!rng.bernoulli(0.5)) continue;
        const auto& d = layout[i];
        if (d.mode.is_discrete())
          std::swap(c1[i], c2[i]);
        else
          detail::sbx(c1[i], c2[i], d.range.lo, d.range.hi, settings.crossover_eta, rng);
      }
    }
    mutate(c1);
    mutate(c2);
    for (auto* c : {&c1, &c2}) {
      if (out.size() == count) break;
      for (std::size_t i = 0; i < dim; ++i) (*c)[i] = layout.project(i, (*c)[i]);
      out.push_back({std::move(*c), std::nullopt, Provenance::NsgaOffspring});
    }
  }
  return out;
}

struct AcoMhSettings {
  double locality = 0.1;   // q: spread of the rank weights over the elite list
  double width = 0.85;     // xi: kernel width per unit of mean absolute deviation
  double smoothing = 0.1;  // epsilon: additive smoothing of discrete frequencies
  std::size_t elites = 0;  // 0 means the whole source set
};

/// Rank weights exp(-(l-1)^2 / (2 (q k)^2)) normalized to sum 1.
inline std::vector<double> rank_weights(std::size_t k, double q) {
  std::vector<double> w(k);
  const double s = std::max(q * static_cast<double>(k), 1e-12);
  for (std::size_t l = 0; l < k; ++l)
    w[l] = std::exp(-static_cast<double>(l * l) / (2.0 * s * s));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return w;
}

/// Probability of each of k discrete points given the elites' chosen point
/// indices and their (normalized) weights: (freq + eps) / (1 + k eps).
inline std::vector<double> discrete_choice_probabilities(std::span<const std::size_t> chosen,
                                                         std::span<const double> weights,
                                                         std::size_t k, double eps) {
  std::vector<double> p(k, eps);
  double total_w = 0.0;
  for (std::size_t e = 0; e < chosen.size(); ++e) total_w += weights[e];
  for (std::size_t e = 0; e < chosen.size(); ++e) p[chosen[e]] += weights[e] / total_w;
  for (double& x : p) x /= 1.0 + static_cast<double>(k) * eps;
  return p;
}

inline double interquartile_range(std::vector<double> v) {
  if (v.size() < 2) return 0.0;
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double f = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] + f * (v[i + 1] - v[i]) : v[i];
  };
  return q(0.75) - q(0.25);
}

/// Hybrid continuous-ACO / Metropolis sampler.
///
/// Elites are the source members in crowded-comparison order with Gaussian rank
/// weights. A Metropolis chain walks over elite kernel centers: a proposed center
/// drawn by rank weight replaces the current one with probability
/// min(1, exp(-(f_new - f_cur) / T)), T being the interquartile range of the source's
/// primary objectives. Each offspring is then drawn from the accepted center's
/// kernel: Gaussian on continuous dims with width proportional to the elites' mean
/// absolute deviation from the center (reflected into range), and a smoothed
/// rank-weighted frequency vote on discrete dims.
inline std::vector<Candidate> generate_offspring_aco_mh(const Population& source,
                                                        const SearchLayout& layout,
                                                        std::size_t count, Rng& rng,
                                                        const AcoMhSettings& settings = {}) {
  std::vector<Candidate> out;
  if (source.members.empty()) throw StateError("aco-mh: empty source set");
  if (count == 0) return out;
  detail::require_evaluated(source, "aco-mh");

  const auto objs = source.objective_vectors();
  auto order = crowded_order(objs);
  const std::size_t k = settings.elites ? std::min(settings.elites, order.size()) : order.size();
  order.resize(k);
  const auto weights = rank_weights(k, settings.locality);
  std::vector<double> cumulative(k);
  std::partial_sum(weights.begin(), weights.end(), cumulative.begin());
  auto draw_elite = [&]() {
    const double u = rng.uniform01() * cumulative.back();
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    return static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                             static_cast<std::ptrdiff_t>(k - 1)));
  };

  std::vector<double> primaries;
  primaries.reserve(objs.size());
  for (const auto& o : objs) primaries.push_back(o[0]);
  const double temperature = interquartile_range(primaries);

  const std::size_t dim = layout.size();
  // Discrete probabilities do not depend on the center; compute once per dim.
  std::vector<std::vector<double>> discrete_cdf(dim);
  std::vector<std::size_t> chosen(k);
  for (std::size_t i = 0; i < dim; ++i) {
    const auto& d = layout[i];
    if (!d.mode.is_discrete()) continue;
    for (std::size_t e = 0; e < k; ++e) {
      const double v = source.members[order[e]].assignment[i];
      const double snapped = snap_to_points(v, d.points);
      chosen[e] = static_cast<std::size_t>(
          std::find(d.points.begin(), d.points.end(), snapped) - d.points.begin());
    }
    auto p = discrete_choice_probabilities(chosen, weights, d.points.size(), settings.smoothing);
    std::partial_sum(p.begin(), p.end(), p.begin());
    discrete_cdf[i] = std::move(p);
  }

  std::size_t center = draw_elite();
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t proposal = draw_elite();
    const double delta = objs[order[proposal]][0] - objs[order[center]][0];
    const double u = rng.uniform01();
    if (delta <= 0.0 || (temperature > 0.0 && u < std::exp(-delta / temperature)))
      center = proposal;

    const auto& mu = source.members[order[center]].assignment;
    std::vector<double> x(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const auto& d = layout[i];
      if (d.mode.is_discrete()) {
        const auto& cdf = discrete_cdf[i];
        const double r = rng.uniform01() * cdf.back();
        auto j = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) -
                                          cdf.begin());
        x[i] = d.points[std::min(j, d.points.size() - 1)];
        continue;
      }
      double spread = 0.0;
      if (k > 1) {
        for (std::size_t e = 0; e < k; ++e)
          spread += std::abs(source.members[order[e]].assignment[i] - mu[i]);
        spread = settings.width * spread / static_cast<double>(k - 1);
      }
      const double base = layout.project(i, mu[i]);
      x[i] = spread > 0.0 ? detail::reflect(rng.normal(base, spread), d.range.lo, d.range.hi)
                          : base;
      x[i] = layout.project(i, x[i]);
    }
    out.push_back({std::move(x), std::nullopt, Provenance::AcoMhOffspring});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive query allocation

struct MethodWeights {
  std::vector<double> weights;
};

/// Weight of method m proportional to (survivors_m + 1), floored at `floor` and
/// renormalized so floored methods keep exactly the floor.
inline MethodWeights allocate_queries(std::span<const long> survivors, std::size_t methods = 2,
                                      double floor = 0.1) {
  MethodWeights mw;
  if (survivors.empty()) {
    mw.weights.assign(methods, 1.0 / static_cast<double>(methods));
    return mw;
  }
  const std::size_t n = survivors.size();
  std::vector<double> raw(n);
  for (std::size_t m = 0; m < n; ++m)
    raw[m] = static_cast<double>(std::max(0L, survivors[m])) + 1.0;
  std::vector<bool> pinned(n, false);
  std::vector<double> w(n);
  for (;;) {
    double free_raw = 0.0;
    std::size_t pinned_count = 0;
    for (std::size_t m = 0; m < n; ++m) {
      if (pinned[m])
        ++pinned_count;
      else
        free_raw += raw[m];
    }
    const double free_mass = 1.0 - floor * static_cast<double>(pinned_count);
    bool changed = false;
    for (std::size_t m = 0; m < n; ++m) {
      w[m] = pinned[m] ? floor : free_mass * raw[m] / free_raw;
      if (!pinned[m] && w[m] < floor) {
        pinned[m] = true;
        changed = true;
      }
    }
    if (!changed) break;
  }
  mw.weights = std::move(w);
  return mw;
}

/// Largest-remainder split of `count` according to weights.
inline std::vector<std::size_t> split_count(std::size_t count, std::span<const double> weights) {
  std::vector<std::size_t> out(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t m = 0; m < weights.size(); ++m) {
    const double exact = weights[m] * static_cast<double>(count);
    out[m] = static_cast<std::size_t>(exact);
    used += out[m];
    rem.emplace_back(exact - static_cast<double>(out[m]), m);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; used < count; ++j, ++used) ++out[rem[j % rem.size()].second];
  return out;
}

// ---------------------------------------------------------------------------
// Population initialization

/// Random population drawn through the layout, optionally seeded with the best
/// members of a previous population re-projected into the current layout.
inline Population initialize_population(const SearchLayout& layout, std::size_t size,
                                        const Population* carryover, double reinit_fraction,
                                        Rng& rng) {
  if (size < 2) throw ArgumentError("initialize_population: size must be >= 2");
  if (!(reinit_fraction >= 0.0 && reinit_fraction <= 1.0))
    throw ArgumentError("initialize_population: reinit_fraction outside [0, 1]");
  Population pop;
  pop.members.reserve(size);
  std::size_t fresh = size;
  if (carryover && !carryover->members.empty()) {
    for (const auto& m : carryover->members)
      if (m.assignment.size() != layout.size())
        throw ArgumentError("initialize_population: carryover dimensionality mismatch");
    const auto n_random =
        static_cast<std::size_t>(std::llround(static_cast<double>(size) * reinit_fraction));
    std::size_t n_carry = std::min(size - n_random, carryover->size());
    std::vector<std::size_t> order(carryover->size());
    std::iota(order.begin(), order.end(), 0);
    if (carryover->fully_evaluated()) order = crowded_order(carryover->objective_vectors());
    for (std::size_t j = 0; j < n_carry; ++j) {
      Candidate c = carryover->members[order[j]];
      bool moved = false;
      for (std::size_t i = 0; i < layout.size(); ++i) {
        const double p = layout.project(i, c.assignment[i]);
        if (p != c.assignment[i]) {
          c.assignment[i] = p;
          moved = true;
        }
      }
      if (moved) c.objectives.reset();
      c.provenance = Provenance::Carryover;
      pop.members.push_back(std::move(c));
    }
    fresh = size - n_carry;
  }
  for (std::size_t j = 0; j < fresh; ++j)
    pop.members.push_back({layout.sample(rng), std::nullopt, Provenance::RandomInit});
  return pop;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Assignment (search scale) -> objective vector (minimized).
using ObjectiveFunction = std::function<Objectives(std::span<const double>)>;

/// Evaluates candidates in place; with jobs > 1 evaluations run concurrently but
/// results land by index. The lowest-index failure is rethrown.
inline void evaluate_batch(const ObjectiveFunction& f, std::span<Candidate> batch,
                           unsigned jobs = 1) {
  auto eval_one = [&](Candidate& c) {
    try {
      c.objectives = f(c.assignment);
    } catch (const EvaluationError&) {
      throw;
    } catch (const std::exception& e) {
      throw EvaluationError(std::string("evaluation failed: ") + e.what(), c.assignment);
    }
  };
  if (jobs <= 1 || batch.size() < 2) {
    for (auto& c : batch) eval_one(c);
    return;
  }
  std::vector<std::exception_ptr> errors(batch.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i; (i = next.fetch_add(1)) < batch.size();) {
      try {
        eval_one(batch[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const unsigned t = std::min<unsigned>(jobs, static_cast<unsigned>(batch.size()));
    for (unsigned j = 0; j < t; ++j) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct EvaluationLogEntry {
  std::vector<double> assignment;
  Objectives objectives;
  Provenance provenance;
};

struct OptimizerSettings {
  std::size_t pop_size = 50;
  double reinit_fraction = 0.2;
  unsigned jobs = 1;
  Nsga2Settings nsga2;
  AcoMhSettings aco_mh;
};

struct RunOutcome {
  Population population;
  std::vector<EvaluationLogEntry> log;
  std::vector<long> survivors;  // per method, accumulated over the run
};

/// One run of the ensemble optimizer. Consumes exactly `budget` evaluations.
/// `survivor_history` holds the previous generation's per-method survivor counts
/// (NSGA-II first) and is updated in place.
inline RunOutcome evolve_run(const ObjectiveFunction& f, Population population,
                             const SearchLayout& layout, long budget,
                             const OptimizerSettings& settings, Rng& rng,
                             std::vector<long>* survivor_history = nullptr) {
  RunOutcome out;
  out.survivors.assign(2, 0);
  std::vector<long> last_gen;
  if (survivor_history) last_gen = *survivor_history;

  std::vector<Candidate*> pending;
  for (auto& m : population.members)
    if (!m.evaluated()) pending.push_back(&m);
  if (static_cast<long>(pending.size()) > budget)
    throw StateError("evolve_run: budget " + std::to_string(budget) +
                     " is smaller than the unevaluated population (" +
                     std::to_string(pending.size()) + ")");
  {
    std::vector<Candidate> batch;
    for (auto* c : pending) batch.push_back(*c);
    evaluate_batch(f, batch, settings.jobs);
    for (std::size_t j = 0; j < pending.size(); ++j) {
      *pending[j] = std::move(batch[j]);
      out.log.push_back({pending[j]->assignment, *pending[j]->objectives,
                         pending[j]->provenance});
    }
  }
  long used = static_cast<long>(pending.size());
  const std::size_t pop_size = settings.pop_size;

  while (used < budget) {
    const auto count = static_cast<std::size_t>(
        std::min<long>(static_cast<long>(pop_size), budget - used));
    const auto weights = allocate_queries(last_gen, 2);
    const auto split = split_count(count, weights.weights);

    std::vector<Candidate> offspring = generate_offspring_nsga2(population, layout, split[0], rng,
                                                                settings.nsga2);
    auto aco = generate_offspring_aco_mh(population, layout, split[1], rng, settings.aco_mh);
    for (auto& c : aco) offspring.push_back(std::move(c));
    evaluate_batch(f, offspring, settings.jobs);
    for (const auto& c : offspring) out.log.push_back({c.assignment, *c.objectives, c.provenance});
    used += static_cast<long>(offspring.size());

    const std::size_t parents = population.size();
    for (auto& c : offspring) population.members.push_back(std::move(c));
    const auto objs = population.objective_vectors();
    const auto keep = environmental_select(objs, std::min(pop_size, population.size()));

    last_gen.assign(2, 0);
    Population next;
    next.members.reserve(keep.size());
    for (std::size_t idx : keep) {
      const auto& c = population.members[idx];
      if (idx >= parents) {
        if (c.provenance == Provenance::NsgaOffspring) ++last_gen[0];
        if (c.provenance == Provenance::AcoMhOffspring) ++last_gen[1];
      }
      next.members.push_back(c);
    }
    out.survivors[0] += last_gen[0];
    out.survivors[1] += last_gen[1];
    population = std::move(next);
  }
  if (survivor_history) *survivor_history = last_gen;
  out.population = std::move(population);
  return out;
}

// ---------------------------------------------------------------------------
// Archive of best solutions

class Archive {
 public:
  explicit Archive(std::size_t capacity = 20) : capacity_(capacity) {
    if (capacity == 0) throw ArgumentError("archive capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return members_.size(); }
  const std::vector<Candidate>& members() const { return members_; }

  /// Inserts an evaluated candidate if it ranks among the best by primary
  /// objective and its assignment is not already present.
  void offer(const Candidate& c) {
    if (!c.evaluated()) throw StateError("archive: candidate not evaluated");
    if (members_.size() == capacity_ && !(c.primary() < members_.back().primary())) return;
    for (const auto& m : members_)
      if (m.assignment == c.assignment) return;
    auto pos = std::upper_bound(members_.begin(), members_.end(), c.primary(),
                                [](double v, const Candidate& m) { return v < m.primary(); });
    members_.insert(pos, c);
    if (members_.size() > capacity_) members_.pop_back();
  }

  void restore(std::vector<Candidate> members) {
    members_ = std::move(members);
    if (members_.size() > capacity_) members_.resize(capacity_);
  }

 private:
  std::size_t capacity_;
  std::vector<Candidate> members_;
};

// ---------------------------------------------------------------------------
// Run-by-run calibration

/// State persisted after each completed run; enough to resume the trial.
struct CalibrationCheckpoint {
  int completed_runs = 0;
  long evaluations = 0;
  Population population;
  std::vector<Candidate> archive;
  std::vector<SearchRange> ranges;  // ranges used in the last completed run
  std::vector<double> evolution;    // best-so-far primary objective per evaluation
  std::vector<long> survivor_history;
  std::string rng_state;
};

/// A trial stopped on an evaluation failure; carries the last good checkpoint.
class TrialAborted : public std::runtime_error {
 public:
  TrialAborted(const std::string& what, CalibrationCheckpoint cp, std::vector<double> assignment)
      : std::runtime_error(what), checkpoint_(std::move(cp)), assignment_(std::move(assignment)) {}
  const CalibrationCheckpoint& checkpoint() const noexcept { return checkpoint_; }
  const std::vector<double>& assignment() const noexcept { return assignment_; }

 private:
  CalibrationCheckpoint checkpoint_;
  std::vector<double> assignment_;
};

struct CalibrationResult {
  Population population;
  Archive archive;
  std::vector<double> evolution;
  std::vector<std::vector<SearchRange>> run_ranges;  // ranges in effect for each run
  std::vector<std::vector<long>> run_survivors;      // per-run method survivor totals
  long evaluations = 0;
};

/// Search ranges for run `run` (1-based): original bounds for Full and Discrete
/// groups, mean +/- w * sd of the current population for Shrunk groups.
inline std::vector<SearchRange> ranges_for_run(const ParameterSpace& space, const RunPlan& plan,
                                               int run, const Population* current) {
  std::vector<SearchRange> ranges = space.original_ranges();
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto mode = mode_for(plan, run, space[i].group);
    if (mode.kind != ResolutionMode::Kind::Shrunk) continue;
    if (!current || current->members.empty())
      throw StateError("shrunk group in run " + std::to_string(run) + " without a population");
    const auto values = current->column(i);
    ranges[i] = shrink_range(space[i], values, plan.w);
  }
  return ranges;
}

inline std::vector<ResolutionMode> modes_for_run(const RunPlan& plan, int run) {
  std::vector<ResolutionMode> modes;
  for (int g = 1; g <= plan.g; ++g) modes.push_back(mode_for(plan, run, g));
  return modes;
}

/// Runs every run of the plan with population carryover, range shrinking and a
/// trial-wide archive. `on_checkpoint` is called after each completed run.
inline CalibrationResult run_calibration(
    const ObjectiveFunction& f, const ParameterSpace& space, const RunPlan& plan,
    const OptimizerSettings& settings, std::uint64_t seed,
    const CalibrationCheckpoint* resume = nullptr,
    const std::function<void(const CalibrationCheckpoint&)>& on_checkpoint = {}) {
  require_valid(plan, space);
  if (settings.pop_size < 2) throw ArgumentError("run_calibration: pop_size must be >= 2");
  if (plan.runs.front().budget < static_cast<long>(settings.pop_size))
    throw ArgumentError("run_calibration: first run budget is smaller than pop_size");

  Rng rng(seed);
  CalibrationResult result;
  result.archive = Archive(20);
  Population population;
  std::vector<long> history;
  int start = 1;
  std::vector<SearchRange> last_ranges;
  if (resume) {
    start = resume->completed_runs + 1;
    population = resume->population;
    result.archive.restore(resume->archive);
    result.evolution = resume->evolution;
    result.evaluations = resume->evaluations;
    history = resume->survivor_history;
    last_ranges = resume->ranges;
    rng.restore(resume->rng_state);
  }
  double best = result.evolution.empty() ? std::numeric_limits<double>::infinity()
                                         : result.evolution.back();

  auto snapshot = [&](int completed) {
    CalibrationCheckpoint cp;
    cp.completed_runs = completed;
    cp.evaluations = result.evaluations;
    cp.population = population;
    cp.archive = result.archive.members();
    cp.ranges = last_ranges;
    cp.evolution = result.evolution;
    cp.survivor_history = history;
    cp.rng_state = rng.state();
    return cp;
  };

  for (int r = start; r <= static_cast<int>(plan.runs.size()); ++r) {
    const CalibrationCheckpoint before = snapshot(r - 1);
    try {
      const auto ranges = ranges_for_run(space, plan, r, r > 1 ? &population : nullptr);
      const auto modes = modes_for_run(plan, r);
      const SearchLayout layout(space, ranges, modes);
      Population init = initialize_population(layout, settings.pop_size,
                                              r > 1 ? &population : nullptr,
                                              settings.reinit_fraction, rng);
      auto outcome = evolve_run(f, std::move(init), layout,
                                plan.runs[static_cast<std::size_t>(r - 1)].budget, settings, rng,
                                &history);
      for (const auto& e : outcome.log) {
        Candidate c{e.assignment, e.objectives, e.provenance};
        result.archive.offer(c);
        best = std::min(best, e.objectives.front());
        result.evolution.push_back(best);
      }
      result.evaluations += static_cast<long>(outcome.log.size());
      result.run_ranges.push_back(ranges);
      result.run_survivors.push_back(outcome.survivors);
      population = std::move(outcome.population);
      last_ranges = ranges;
    } catch (const EvaluationError& e) {
      throw TrialAborted(std::string("run ") + std::to_string(r) + ": " + e.what(), before,
                         e.assignment());
    }
    if (on_checkpoint) on_checkpoint(snapshot(r));
  }
  result.population = std::move(population);
  return result;
}

}  // namespace mhcal
