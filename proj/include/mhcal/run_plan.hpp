#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mhcal/errors.hpp"
#include "mhcal/parameter_space.hpp"

namespace mhcal {

struct RunConfig {
  long budget = 1;
  std::vector<ResolutionMode> modes;  // indexed by group - 1

  bool operator==(const RunConfig&) const = default;
};

/// Output of the strategy phase: which group is searched at which resolution
/// in every run, and how many evaluations each run gets.
struct RunPlan {
  int g = 1;
  double w = 2.0;
  std::vector<RunConfig> runs;

  int fine_tuning_runs() const { return static_cast<int>(runs.size()) - g; }

  long total_budget() const {
    long t = 0;
    for (const auto& r : runs) t += r.budget;
    return t;
  }

  /// Cumulative evaluation count at the end of each run.
  std::vector<long> cumulative_budgets() const {
    std::vector<long> out;
    long t = 0;
    for (const auto& r : runs) out.push_back(t += r.budget);
    return out;
  }

  bool operator==(const RunPlan&) const = default;
};

/// The six-group, seven-run schedule with budgets 200..1000 (4000 total) and w = 2.
inline RunPlan default_plan() {
  using M = ResolutionMode;
  const long budgets[] = {200, 300, 450, 550, 700, 800, 1000};
  // Discrete point counts for group 6 in runs 1..5.
  const int g6_points[] = {2, 2, 2, 3, 5};
  RunPlan plan;
  plan.g = 6;
  plan.w = 2.0;
  for (int r = 1; r <= 7; ++r) {
    RunConfig rc;
    rc.budget = budgets[r - 1];
    for (int grp = 1; grp <= 6; ++grp) {
      if (r > 6 || grp < r) {
        rc.modes.push_back(M::shrunk());
      } else if (grp == r) {
        rc.modes.push_back(M::full());
      } else if (grp == 6) {
        rc.modes.push_back(M::discrete(g6_points[r - 1]));
      } else {
        rc.modes.push_back(M::discrete(5));
      }
    }
    plan.runs.push_back(std::move(rc));
  }
  return plan;
}

/// Whole-space baseline: a single run with every parameter at full range.
inline RunPlan traditional_plan(long total_budget, double w = 2.0) {
  RunPlan plan;
  plan.g = 1;
  plan.w = w;
  plan.runs.push_back({total_budget, {ResolutionMode::full()}});
  return plan;
}

/// Copy of the plan with every budget multiplied by factor (rounded, at least 1).
inline RunPlan scaled_plan(RunPlan plan, double factor) {
  for (auto& r : plan.runs)
    r.budget = std::max(1L, static_cast<long>(static_cast<double>(r.budget) * factor + 0.5));
  return plan;
}

inline ResolutionMode mode_for(const RunPlan& plan, int run, int group) {
  if (run < 1 || run > static_cast<int>(plan.runs.size()))
    throw ArgumentError("mode_for: run " + std::to_string(run) + " out of range");
  if (group < 1 || group > plan.g)
    throw ArgumentError("mode_for: group " + std::to_string(group) + " out of range");
  const auto& modes = plan.runs[static_cast<std::size_t>(run - 1)].modes;
  if (static_cast<int>(modes.size()) != plan.g)
    throw ArgumentError("mode_for: run " + std::to_string(run) + " has wrong mode count");
  return modes[static_cast<std::size_t>(group - 1)];
}

struct PlanIssue {
  int run = 0;    // 0 when not run-specific
  int group = 0;  // 0 when not group-specific
  std::string message;
};

struct ValidationReport {
  std::vector<PlanIssue> errors;
  std::vector<std::string> warnings;

  bool ok() const { return errors.empty(); }

  std::string summary() const {
    std::string s;
    for (const auto& e : errors) {
      if (!s.empty()) s += "; ";
      if (e.run) s += "run " + std::to_string(e.run) + ": ";
      if (e.group) s += "group " + std::to_string(e.group) + ": ";
      s += e.message;
    }
    return s;
  }
};

class PlanError : public ArgumentError {
 public:
  explicit PlanError(ValidationReport report)
      : ArgumentError("invalid run plan: " + report.summary()), report_(std::move(report)) {}
  const ValidationReport& report() const noexcept { return report_; }

 private:
  ValidationReport report_;
};

/// Plan invariants only (no parameter space).
inline ValidationReport validate_plan(const RunPlan& plan) {
  ValidationReport rep;
  if (plan.g < 1) rep.errors.push_back({0, 0, "g must be >= 1"});
  if (!(plan.w > 0.0)) rep.errors.push_back({0, 0, "w must be positive"});
  if (static_cast<int>(plan.runs.size()) < plan.g)
    rep.errors.push_back({0, 0, "plan has fewer runs than groups"});
  if (!rep.ok()) return rep;

  for (int r = 1; r <= static_cast<int>(plan.runs.size()); ++r) {
    const auto& rc = plan.runs[static_cast<std::size_t>(r - 1)];
    if (rc.budget < 1) rep.errors.push_back({r, 0, "budget must be >= 1"});
    if (static_cast<int>(rc.modes.size()) != plan.g) {
      rep.errors.push_back({r, 0, "expected " + std::to_string(plan.g) + " group modes"});
      continue;
    }
    for (int grp = 1; grp <= plan.g; ++grp) {
      const auto& m = rc.modes[static_cast<std::size_t>(grp - 1)];
      if (m.is_discrete() && m.points < 2)
        rep.errors.push_back({r, grp, "discrete mode needs at least 2 points"});
      std::string expected;
      if (r > plan.g || grp < r) {
        if (m.kind != ResolutionMode::Kind::Shrunk) expected = "shrunk";
      } else if (grp == r) {
        if (m.kind != ResolutionMode::Kind::Full) expected = "full";
      } else if (!m.is_discrete()) {
        expected = "discrete";
      }
      if (!expected.empty())
        rep.errors.push_back({r, grp, "mode " + to_string(m) + ", expected " + expected});
    }
  }
  for (std::size_t r = 1; r < plan.runs.size(); ++r) {
    if (plan.runs[r].budget <= plan.runs[r - 1].budget) {
      rep.warnings.push_back("budget schedule is not increasing at run " + std::to_string(r + 1));
      break;
    }
  }
  return rep;
}

/// Plan invariants plus consistency with a parameter space.
inline ValidationReport validate_plan(const RunPlan& plan, const ParameterSpace& space) {
  ValidationReport rep = validate_plan(plan);
  if (space.groups() != plan.g) {
    rep.errors.push_back({0, 0, "parameter space has " + std::to_string(space.groups()) +
                                    " groups, plan has " + std::to_string(plan.g)});
    return rep;
  }
  const auto sizes = space.group_sizes();
  for (int grp = 1; grp <= plan.g; ++grp)
    if (sizes[static_cast<std::size_t>(grp - 1)] == 0)
      rep.errors.push_back({0, grp, "no parameter is assigned to this group"});
  if (rep.ok() && !sizes.empty()) {
    const auto [mn, mx] = std::minmax_element(sizes.begin(), sizes.end());
    if (*mx > 2 * *mn) {
      rep.warnings.push_back(
          "imbalanced groups: group " + std::to_string(mx - sizes.begin() + 1) + " has " +
          std::to_string(*mx) + " parameters, group " + std::to_string(mn - sizes.begin() + 1) +
          " has " + std::to_string(*mn));
    }
  }
  return rep;
}

inline void require_valid(const RunPlan& plan, const ParameterSpace& space) {
  auto rep = validate_plan(plan, space);
  if (!rep.ok()) throw PlanError(std::move(rep));
}

}  // namespace mhcal
