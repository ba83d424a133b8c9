#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mhcal/errors.hpp"

namespace mhcal {

/// Two-level (regular) factorial design in coded units.
struct FactorialDesign {
  int k = 0;
  std::vector<std::vector<int>> rows;  // entries are -1 or +1
  std::vector<std::string> generators;  // e.g. "x6 = x1*x2*x3*x4*x5"

  std::size_t runs() const { return rows.size(); }
};

/// Full 2^k design when it fits in max_runs; otherwise a 2^(k-p) fraction whose
/// extra factors are aliased with the highest-order interactions of the base factors.
inline FactorialDesign factorial_design(int k, long max_runs) {
  if (k < 1) throw ArgumentError("factorial_design: need at least one factor");
  if (max_runs < 2 || !std::has_single_bit(static_cast<unsigned long>(max_runs)))
    throw ArgumentError("factorial_design: max_runs must be a power of two");
  if (max_runs < k + 1)
    throw ArgumentError("factorial_design: infeasible, max_runs < k + 1");

  int base = std::bit_width(static_cast<unsigned long>(max_runs)) - 1;
  if (base > k) base = k;
  const std::size_t n = std::size_t{1} << base;

  // Column masks over base factors: singletons first, then interactions by
  // descending order (ties by ascending mask).
  std::vector<unsigned> masks;
  for (int j = 0; j < base; ++j) masks.push_back(1u << j);
  std::vector<unsigned> interactions;
  for (unsigned m = 1; m < (1u << base); ++m)
    if (std::popcount(m) >= 2) interactions.push_back(m);
  std::stable_sort(interactions.begin(), interactions.end(), [](unsigned a, unsigned b) {
    return std::popcount(a) > std::popcount(b);
  });

  FactorialDesign d;
  d.k = k;
  for (int j = base; j < k; ++j) {
    const unsigned m = interactions[static_cast<std::size_t>(j - base)];
    masks.push_back(m);
    std::string g = "x" + std::to_string(j + 1) + " =";
    bool first = true;
    for (int b = 0; b < base; ++b) {
      if (!(m & (1u << b))) continue;
      g += (first ? " x" : "*x") + std::to_string(b + 1);
      first = false;
    }
    d.generators.push_back(std::move(g));
  }
  d.rows.assign(n, std::vector<int>(static_cast<std::size_t>(k)));
  for (std::size_t r = 0; r < n; ++r) {
    for (int j = 0; j < k; ++j) {
      int level = 1;
      for (int b = 0; b < base; ++b)
        if (masks[static_cast<std::size_t>(j)] & (1u << b)) level *= ((r >> b) & 1u) ? 1 : -1;
      d.rows[r][static_cast<std::size_t>(j)] = level;
    }
  }
  return d;
}

/// Coded rows mapped to actual factor values (low for -1, high for +1).
inline std::vector<std::vector<double>> design_points(const FactorialDesign& d,
                                                      std::span<const double> low,
                                                      std::span<const double> high) {
  if (low.size() != static_cast<std::size_t>(d.k) || high.size() != low.size())
    throw ArgumentError("design_points: need one low/high pair per factor");
  std::vector<std::vector<double>> out;
  out.reserve(d.rows.size());
  for (const auto& row : d.rows) {
    std::vector<double> x(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) x[j] = row[j] > 0 ? high[j] : low[j];
    out.push_back(std::move(x));
  }
  return out;
}

/// Main-effect contrasts (2 / N) * sum_i rows[i][j] * y_i.
inline std::vector<double> main_effects(const FactorialDesign& d,
                                        std::span<const double> responses) {
  if (responses.size() != d.rows.size())
    throw ArgumentError("main_effects: expected " + std::to_string(d.rows.size()) +
                        " responses, got " + std::to_string(responses.size()));
  std::vector<double> eff(static_cast<std::size_t>(d.k), 0.0);
  for (std::size_t i = 0; i < d.rows.size(); ++i)
    for (std::size_t j = 0; j < eff.size(); ++j) eff[j] += d.rows[i][j] * responses[i];
  const double scale = 2.0 / static_cast<double>(d.rows.size());
  for (double& e : eff) e *= scale;
  return eff;
}

enum class GroupingSource { Ranked, RegionDU, RegionUD, RegionRand, Manual };

inline const char* to_string(GroupingSource s) {
  switch (s) {
    case GroupingSource::Ranked: return "ranked";
    case GroupingSource::RegionDU: return "region-du";
    case GroupingSource::RegionUD: return "region-ud";
    case GroupingSource::RegionRand: return "region-rand";
    case GroupingSource::Manual: return "manual";
  }
  return "?";
}

struct RankedEffect {
  std::string name;
  double magnitude = 0.0;
};

struct GroupAssignment {
  std::map<std::string, int> group;
  GroupingSource source = GroupingSource::Ranked;
};

struct GroupingResult {
  std::vector<RankedEffect> ranking;  // descending |effect|
  GroupAssignment assignment;
  std::set<std::string> fixed;        // insensitive, held at default
};

/// Ranks parameters by |effect|, fixes those below threshold * max|effect|, and
/// cuts the rest into g contiguous groups whose sizes differ by at most one.
/// Override entries then replace the ranked placement of the named parameters.
inline GroupingResult rank_and_group(std::span<const RankedEffect> effects, int g,
                                     double insensitive_threshold,
                                     const std::map<std::string, int>* overrides = nullptr,
                                     GroupingSource override_source = GroupingSource::Manual) {
  if (g < 1) throw ArgumentError("rank_and_group: g must be >= 1");
  GroupingResult out;
  for (const auto& e : effects) out.ranking.push_back({e.name, std::abs(e.magnitude)});
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [](const RankedEffect& a, const RankedEffect& b) {
                     return a.magnitude > b.magnitude;
                   });
  if (overrides) {
    for (const auto& [name, grp] : *overrides) {
      const bool known = std::any_of(effects.begin(), effects.end(),
                                     [&](const RankedEffect& e) { return e.name == name; });
      if (!known) throw ArgumentError("rank_and_group: override for unknown parameter '" + name + "'");
      if (grp < 1 || grp > g)
        throw ArgumentError("rank_and_group: override group out of range for '" + name + "'");
    }
  }

  const double top = out.ranking.empty() ? 0.0 : out.ranking.front().magnitude;
  std::vector<std::string> sensitive;
  for (const auto& r : out.ranking) {
    if (r.magnitude < insensitive_threshold * top && !(overrides && overrides->count(r.name)))
      out.fixed.insert(r.name);
    else if (!(overrides && overrides->count(r.name)))
      sensitive.push_back(r.name);
  }
  const std::size_t n = sensitive.size();
  const auto gg = static_cast<std::size_t>(g);
  std::size_t pos = 0;
  for (std::size_t grp = 0; grp < gg; ++grp) {
    const std::size_t len = n / gg + (grp < n % gg ? 1 : 0);
    for (std::size_t j = 0; j < len; ++j)
      out.assignment.group[sensitive[pos++]] = static_cast<int>(grp) + 1;
  }
  out.assignment.source = GroupingSource::Ranked;
  if (overrides && !overrides->empty()) {
    for (const auto& [name, grp] : *overrides) out.assignment.group[name] = grp;
    out.assignment.source = override_source;
  }
  return out;
}

}  // namespace mhcal
