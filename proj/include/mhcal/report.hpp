#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mhcal/experiment.hpp"
#include "mhcal/stats.hpp"

// Aggregation of persisted trial reports into comparison tables.
namespace mhcal {

struct ConfigurationResults {
  std::string name;
  bool traditional = false;
  std::map<std::string, int> groups;
  std::vector<TrialReport> trials;  // successful trials, ascending index
  std::vector<int> missing;         // trials without a report
};

struct RosareRow {
  std::string config;
  int trial = 0;
  std::optional<RosareResult> result;
  std::string note;  // why result is empty
};

/// NC counts per group of one grouping, averaged over trials.
struct GroupBreakdown {
  std::string label;     // configuration, or "Traditional@<grouping>"
  std::string grouping;  // configuration whose group map is used
  std::vector<double> nc;
};

struct Report {
  ExperimentConfig config;
  ParameterSpace space;  // base space with truths
  std::vector<ConfigurationResults> configurations;
  std::vector<long> checkpoints;
  std::vector<RosareRow> rosare;
  std::vector<double> mean_nc, mean_hb, mean_rosare;  // per configuration
  std::vector<GroupBreakdown> table7;
  /// [configuration][trial][checkpoint] best NSE.
  std::vector<std::vector<std::vector<double>>> table8;
  Json significance;

  const ConfigurationResults& results(const std::string& name) const {
    for (const auto& c : configurations)
      if (c.name == name) return c;
    throw ArgumentError("report: no configuration named '" + name + "'");
  }
  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < configurations.size(); ++i)
      if (configurations[i].name == name) return i;
    throw ArgumentError("report: no configuration named '" + name + "'");
  }
  const GroupBreakdown& breakdown(const std::string& label) const {
    for (const auto& b : table7)
      if (b.label == label) return b;
    throw ArgumentError("report: no group breakdown '" + label + "'");
  }
};

/// Evaluation counts after run 3, after run 4 and at the end of the plan.
inline std::vector<long> report_checkpoints(const RunPlan& plan) {
  const auto cum = plan.cumulative_budgets();
  std::vector<long> out;
  for (std::size_t i : {std::size_t{2}, std::size_t{3}})
    if (i + 1 < cum.size()) out.push_back(cum[i]);
  out.push_back(cum.back());
  return out;
}

namespace detail {

inline double mean_or_nan(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : mean(v);
}

inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json test_json(const TTestResult& r) { return {{"t", num(r.t)}, {"p", num(r.p)}, {"df", num(r.df)}}; }

}  // namespace detail

/// Loads every trial report below `in` and derives the comparison tables.
inline Report build_report(const fs::path& in) {
  Report rep;
  const fs::path cfg_path = in / "resolved_config.json";
  if (!fs::exists(cfg_path)) throw ConfigError("'" + in.string() + "' has no resolved_config.json");
  rep.config = parse_config(Json::parse(read_text(cfg_path)), in);
  const auto& cfg = rep.config;
  rep.space = base_space(build_watershed(cfg.model));
  rep.checkpoints = report_checkpoints(cfg.plan);

  for (std::size_t i = 0; i < cfg.configurations.size(); ++i) {
    const auto& spec = cfg.configurations[i];
    ConfigurationResults r;
    r.name = spec.name;
    r.traditional = spec.traditional();
    r.groups = spec.groups;
    for (int t = 1; t <= cfg.trials; ++t) {
      if (fs::exists(in / spec.name / (trial_stem(t) + ".json")))
        r.trials.push_back(read_trial(in / spec.name, t));
      else
        r.missing.push_back(t);
    }
    if (r.trials.empty()) throw ArgumentError("report: configuration '" + spec.name + "' has no trial reports");
    rep.configurations.push_back(std::move(r));
  }

  // Truth-bearing parameters feed the RosARE comparison.
  std::vector<std::size_t> with_truth;
  for (std::size_t i = 0; i < rep.space.size(); ++i)
    if (rep.space[i].truth) with_truth.push_back(i);
  const auto originals_all = rep.space.original_ranges();

  const ConfigurationResults* trad = nullptr;
  for (const auto& c : rep.configurations)
    if (c.traditional) trad = &c;

  auto trial_of = [](const ConfigurationResults& c, int t) -> const TrialReport* {
    for (const auto& r : c.trials)
      if (r.trial == t) return &r;
    return nullptr;
  };

  for (const auto& c : rep.configurations) {
    std::vector<double> nc, hb, ros;
    for (const auto& t : c.trials) {
      nc.push_back(t.nc);
      hb.push_back(t.hb);
    }
    rep.mean_nc.push_back(detail::mean_or_nan(nc));
    rep.mean_hb.push_back(detail::mean_or_nan(hb));
    if (!c.traditional) {
      for (const auto& t : c.trials) {
        RosareRow row{c.name, t.trial, std::nullopt, ""};
        const TrialReport* base = trad ? trial_of(*trad, t.trial) : nullptr;
        if (!trad) {
          row.note = "no traditional configuration";
        } else if (!base) {
          row.note = "traditional trial missing";
        } else if (with_truth.empty()) {
          row.note = "no parameter truths";
        } else {
          std::vector<BoxplotStats> nb, tb;
          std::vector<double> ne, te, truths;
          std::vector<SearchRange> originals;
          for (std::size_t i : with_truth) {
            nb.push_back(t.boxes[i].box);
            tb.push_back(base->boxes[i].box);
            ne.push_back(apply_scale(rep.space[i], t.boxes[i].box.median, Direction::ToModel));
            te.push_back(apply_scale(rep.space[i], base->boxes[i].box.median, Direction::ToModel));
            truths.push_back(*rep.space[i].truth);
            originals.push_back(originals_all[i]);
          }
          try {
            row.result = mhcal::rosare(nb, tb, ne, te, truths, originals);
            ros.push_back(row.result->ratio);
          } catch (const DomainError& e) {
            row.note = e.what();
          }
        }
        rep.rosare.push_back(std::move(row));
      }
    }
    rep.mean_rosare.push_back(detail::mean_or_nan(ros));

    std::vector<std::vector<double>> per_trial;
    for (const auto& t : c.trials) {
      std::vector<double> at;
      for (long x : rep.checkpoints)
        at.push_back(x <= static_cast<long>(t.evolution.size())
                         ? t.evolution[static_cast<std::size_t>(x - 1)]
                         : std::numeric_limits<double>::quiet_NaN());
      per_trial.push_back(std::move(at));
    }
    rep.table8.push_back(std::move(per_trial));
  }

  // NC by group: each configuration under its own grouping; the traditional
  // baseline under every framework grouping.
  auto breakdown = [&](const ConfigurationResults& c, const ConfigurationResults& grouping,
                       const std::string& label) {
    int g = 1;
    for (const auto& [_, k] : grouping.groups) g = std::max(g, k);
    GroupBreakdown b{label, grouping.name, std::vector<double>(static_cast<std::size_t>(g), 0.0)};
    for (const auto& t : c.trials)
      for (const auto& box : t.boxes)
        if (box.nc) b.nc[static_cast<std::size_t>(grouping.groups.at(box.name) - 1)] += 1.0;
    for (double& v : b.nc) v /= static_cast<double>(c.trials.size());
    return b;
  };
  for (const auto& c : rep.configurations) {
    if (c.traditional) continue;
    rep.table7.push_back(breakdown(c, c, c.name));
    if (trad) rep.table7.push_back(breakdown(*trad, c, trad->name + "@" + c.name));
  }
  if (trad) rep.table7.push_back(breakdown(*trad, *trad, trad->name));

  // Significance summary.
  Json sig = Json::object();
  sig["pairwise_method"] = "welch-t";
  auto column = [&](const ConfigurationResults& c, bool use_nc) {
    std::vector<double> v;
    for (const auto& t : c.trials) v.push_back(use_nc ? t.nc : t.hb);
    return v;
  };
  for (const bool use_nc : {true, false}) {
    const std::string key = use_nc ? "nc" : "hb";
    std::vector<std::vector<double>> groups;
    std::vector<std::string> names;
    for (const auto& c : rep.configurations) {
      groups.push_back(column(c, use_nc));
      names.push_back(c.name);
    }
    Json anova = {{"configurations", names}};
    try {
      const auto a = anova_one_way(groups);
      anova["f"] = detail::num(a.f);
      anova["p"] = detail::num(a.p);
      anova["df_between"] = a.df_between;
      anova["df_within"] = a.df_within;
    } catch (const std::exception& e) {
      anova["error"] = e.what();
    }
    sig["anova_" + key] = anova;
    Json pairs = Json::array();
    if (trad) {
      for (const auto& c : rep.configurations) {
        if (c.traditional) continue;
        Json p = {{"configuration", c.name}, {"against", trad->name}};
        try {
          p.update(detail::test_json(welch_t_test(column(c, use_nc), column(*trad, use_nc))));
        } catch (const std::exception& e) {
          p["error"] = e.what();
        }
        pairs.push_back(p);
      }
    }
    sig["welch_" + key] = pairs;
  }
  Json ros_tests = Json::array();
  for (const auto& c : rep.configurations) {
    if (c.traditional) continue;
    std::vector<double> v;
    for (const auto& r : rep.rosare)
      if (r.config == c.name && r.result) v.push_back(r.result->ratio);
    Json t = {{"configuration", c.name}, {"mu0", 0.5}, {"n", v.size()}, {"mean", detail::num(detail::mean_or_nan(v))}};
    try {
      t.update(detail::test_json(t_test_one_sample(v, 0.5)));
    } catch (const std::exception& e) {
      t["error"] = e.what();
    }
    ros_tests.push_back(t);
  }
  sig["rosare_vs_half"] = ros_tests;
  rep.significance = std::move(sig);
  return rep;
}

/// Writes the report tables as CSV plus significance.json.
inline void write_report(const Report& rep, const fs::path& out) {
  fs::create_directories(out);
  const auto& configs = rep.configurations;

  std::string boxes = "configuration,trial,parameter,group,q1,median,q3,lower_whisker,upper_whisker,nc,hb\n";
  std::string counts = "configuration,trial,nc,hb\n";
  for (const auto& c : configs)
    for (const auto& t : c.trials) {
      counts += c.name + "," + std::to_string(t.trial) + "," + std::to_string(t.nc) + "," + std::to_string(t.hb) + "\n";
      for (const auto& b : t.boxes)
        boxes += c.name + "," + std::to_string(t.trial) + "," + b.name + "," + std::to_string(b.group) + "," +
                 format_double(b.box.q1) + "," + format_double(b.box.median) + "," + format_double(b.box.q3) +
                 "," + format_double(b.box.lower_whisker) + "," + format_double(b.box.upper_whisker) + "," +
                 (b.nc ? "1" : "0") + "," + (b.hb ? "1" : "0") + "\n";
    }
  write_text(out / "boxplots.csv", boxes);
  write_text(out / "nc_hb_per_trial.csv", counts);

  std::string ros = "configuration,trial,wins,eligible,rosare,note\n";
  for (const auto& r : rep.rosare)
    ros += r.config + "," + std::to_string(r.trial) + "," + (r.result ? std::to_string(r.result->wins) : "NA") + "," +
           (r.result ? std::to_string(r.result->eligible) : "NA") + "," +
           format_double(r.result ? r.result->ratio : std::numeric_limits<double>::quiet_NaN()) + "," + r.note + "\n";
  write_text(out / "rosare_per_trial.csv", ros);

  std::string t6 = "metric";
  for (const auto& c : configs) t6 += "," + c.name;
  t6 += "\n";
  const std::pair<const char*, const std::vector<double>*> rows[] = {
      {"NC", &rep.mean_nc}, {"HB", &rep.mean_hb}, {"RosARE", &rep.mean_rosare}};
  for (const auto& [label, values] : rows) {
    t6 += label;
    for (double v : *values) t6 += "," + format_double(v);
    t6 += "\n";
  }
  write_text(out / "table6.csv", t6);

  std::size_t gmax = 0;
  for (const auto& b : rep.table7) gmax = std::max(gmax, b.nc.size());
  std::string t7 = "row,grouping";
  for (std::size_t g = 1; g <= gmax; ++g) t7 += ",group_" + std::to_string(g);
  t7 += ",total\n";
  for (const auto& b : rep.table7) {
    t7 += b.label + "," + b.grouping;
    double total = 0;
    for (std::size_t g = 0; g < gmax; ++g) {
      t7 += "," + (g < b.nc.size() ? format_double(b.nc[g]) : std::string("NA"));
      if (g < b.nc.size()) total += b.nc[g];
    }
    t7 += "," + format_double(total) + "\n";
  }
  write_text(out / "table7.csv", t7);

  std::string t8 = "configuration,trial";
  for (long x : rep.checkpoints) t8 += ",nse_at_" + std::to_string(x);
  t8 += "\n";
  for (std::size_t ci = 0; ci < configs.size(); ++ci) {
    std::vector<double> sums(rep.checkpoints.size(), 0.0);
    for (std::size_t ti = 0; ti < configs[ci].trials.size(); ++ti) {
      t8 += configs[ci].name + "," + std::to_string(configs[ci].trials[ti].trial);
      for (std::size_t k = 0; k < rep.checkpoints.size(); ++k) {
        t8 += "," + format_double(rep.table8[ci][ti][k]);
        sums[k] += rep.table8[ci][ti][k];
      }
      t8 += "\n";
    }
    t8 += configs[ci].name + ",mean";
    for (double s : sums) t8 += "," + format_double(s / static_cast<double>(configs[ci].trials.size()));
    t8 += "\n";
  }
  write_text(out / "table8.csv", t8);

  // One column per configuration x trial, one row per evaluation.
  std::string evo = "evaluation";
  std::size_t rows_n = 0;
  std::vector<const std::vector<double>*> cols;
  for (const auto& c : configs)
    for (const auto& t : c.trials) {
      evo += "," + c.name + "_" + trial_stem(t.trial);
      cols.push_back(&t.evolution);
      rows_n = std::max(rows_n, t.evolution.size());
    }
  evo += "\n";
  for (std::size_t r = 0; r < rows_n; ++r) {
    evo += std::to_string(r + 1);
    for (const auto* col : cols) evo += "," + (r < col->size() ? format_double((*col)[r]) : std::string("NA"));
    evo += "\n";
  }
  write_text(out / "evolution.csv", evo);

  write_text(out / "significance.json", rep.significance.dump(2) + "\n");
}

inline Report emit_report(const fs::path& in, const fs::path& out) {
  auto rep = build_report(in);
  write_report(rep, out);
  return rep;
}

}  // namespace mhcal
