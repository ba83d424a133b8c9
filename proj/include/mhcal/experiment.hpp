#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mhcal/errors.hpp"
#include "mhcal/objectives.hpp"
#include "mhcal/optimizer.hpp"
#include "mhcal/parameter_space.hpp"
#include "mhcal/random.hpp"
#include "mhcal/run_plan.hpp"
#include "mhcal/sensitivity.hpp"
#include "mhcal/stats.hpp"
#include "mhcal/synthetic.hpp"

// Experiment orchestration: configuration files, the toy watershed behind the
// objective, screening-based grouping, trial execution with checkpoints.
namespace mhcal {

using Json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Small I/O helpers

/// Shortest-exact decimal form used in every CSV.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ArgumentError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file so readers never see a partial file.
inline void write_text(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, p);
}

/// Numeric columns of a CSV file with one header line.
inline std::vector<std::vector<double>> read_csv_columns(const fs::path& p, std::size_t columns) {
  std::istringstream in(read_text(p));
  std::string line;
  std::vector<std::vector<double>> out(columns);
  bool header = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::istringstream row(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(row, cell, ',') && c < columns) {
      try {
        out[c++].push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ArgumentError(p.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (c != columns)
      throw ArgumentError(p.string() + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(columns) + " columns");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  enum class Type { Synthetic, SelfSynthetic, External };
  Type type = Type::Synthetic;
  int cells = 20;
  std::uint64_t seed = 1;
  std::size_t days = 1095;
  std::size_t spinup_days = 365;
  std::string observed;  // external only; absolute paths after loading
  std::string forcing;
  std::string truth;     // optional

  bool operator==(const ModelConfig&) const = default;
};

inline const char* to_string(ModelConfig::Type t) {
  switch (t) {
    case ModelConfig::Type::Synthetic: return "synthetic";
    case ModelConfig::Type::SelfSynthetic: return "self";
    case ModelConfig::Type::External: return "external";
  }
  return "?";
}

struct SensitivityConfig {
  double threshold = 0.01;
  long max_runs = 128;
  double low = 0.25;   // low/high levels as positions within each search range
  double high = 0.75;

  bool operator==(const SensitivityConfig&) const = default;
};

/// One calibration scheme of the experiment. `groups` is complete after loading.
struct ConfigurationSpec {
  std::string name;
  std::string grouping;  // ranked, ranked-du, ranked-ud, ranked-rand, manual, traditional
  std::map<std::string, int> groups;

  bool traditional() const { return grouping == "traditional"; }
  bool operator==(const ConfigurationSpec&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ModelConfig model;
  RunPlan plan = default_plan();
  std::vector<ConfigurationSpec> configurations;
  int trials = 10;
  std::size_t pop_size = 50;
  double reinit_fraction = 0.2;
  std::uint64_t base_seed = 1;
  std::vector<MetricSpec> metrics = {MetricSpec{}};
  SensitivityConfig sensitivity;

  bool operator==(const ExperimentConfig&) const = default;
};

inline const std::set<std::string>& known_groupings() {
  static const std::set<std::string> g = {"ranked",      "ranked-du", "ranked-ud",
                                          "ranked-rand", "manual",    "traditional"};
  return g;
}

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
T get(const Json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline Json mode_to_json(const ResolutionMode& m) {
  if (m.is_discrete()) return m.points;
  return to_string(m);
}

inline ResolutionMode mode_from_json(const Json& j, const std::string& where) {
  if (j.is_number_integer()) {
    const int k = j.get<int>();
    if (k < 2) throw ConfigError(where + ": discrete resolution needs at least 2 points");
    return ResolutionMode::discrete(k);
  }
  if (j.is_string()) {
    if (j == "full") return ResolutionMode::full();
    if (j == "shrunk") return ResolutionMode::shrunk();
  }
  throw ConfigError(where + ": mode must be \"full\", \"shrunk\" or a point count");
}

inline RunPlan plan_from_json(const Json& j) {
  const std::string where = "plan";
  if (j.is_string()) {
    if (j == "default") return default_plan();
    throw ConfigError("plan: unknown plan name '" + j.get<std::string>() + "'");
  }
  check_keys(j, where, {"base", "scale", "traditional", "g", "w", "runs"});
  if (j.contains("traditional")) {
    const long budget = get<long>(j, "traditional", where, 0);
    if (budget < 1) throw ConfigError("plan.traditional: budget must be positive");
    return traditional_plan(budget, get<double>(j, "w", where, 2.0));
  }
  if (j.contains("base")) {
    if (get<std::string>(j, "base", where, "") != "default")
      throw ConfigError("plan.base: only \"default\" is available");
    const double scale = get<double>(j, "scale", where, 1.0);
    if (!(scale > 0.0)) throw ConfigError("plan.scale: must be positive");
    return scaled_plan(default_plan(), scale);
  }
  RunPlan p;
  p.g = get<int>(j, "g", where, 0);
  p.w = get<double>(j, "w", where, 2.0);
  if (p.g < 1) throw ConfigError("plan.g: must be >= 1");
  if (!(p.w > 0.0)) throw ConfigError("plan.w: must be positive");
  if (!j.contains("runs") || !j.at("runs").is_array() || j.at("runs").empty())
    throw ConfigError("plan.runs: expected a non-empty array");
  for (std::size_t r = 0; r < j.at("runs").size(); ++r) {
    const auto& jr = j.at("runs")[r];
    const std::string w = "plan.runs[" + std::to_string(r) + "]";
    check_keys(jr, w, {"budget", "modes"});
    RunConfig rc;
    rc.budget = get<long>(jr, "budget", w, 0);
    if (!jr.contains("modes") || !jr.at("modes").is_array()) throw ConfigError(w + ".modes: expected an array");
    for (std::size_t g = 0; g < jr.at("modes").size(); ++g)
      rc.modes.push_back(mode_from_json(jr.at("modes")[g], w + ".modes[" + std::to_string(g) + "]"));
    p.runs.push_back(std::move(rc));
  }
  return p;
}

inline Json plan_to_json(const RunPlan& p) {
  Json runs = Json::array();
  for (const auto& r : p.runs) {
    Json modes = Json::array();
    for (const auto& m : r.modes) modes.push_back(mode_to_json(m));
    runs.push_back({{"budget", r.budget}, {"modes", modes}});
  }
  return {{"g", p.g}, {"w", p.w}, {"runs", runs}};
}

inline ConfigurationSpec configuration_from_json(const Json& j, const std::string& where) {
  static const std::map<std::string, std::string> shorthand = {
      {"RankedDU", "ranked-du"}, {"RankedUD", "ranked-ud"}, {"RankedRand", "ranked-rand"},
      {"Ranked", "ranked"},      {"Traditional", "traditional"}};
  ConfigurationSpec c;
  if (j.is_string()) {
    c.name = j.get<std::string>();
    const auto it = shorthand.find(c.name);
    if (it == shorthand.end()) throw ConfigError(where + ": unknown configuration '" + c.name + "'");
    c.grouping = it->second;
    return c;
  }
  check_keys(j, where, {"name", "grouping", "groups"});
  c.name = get<std::string>(j, "name", where, "");
  c.grouping = get<std::string>(j, "grouping", where, j.contains("groups") ? "manual" : "");
  if (!known_groupings().count(c.grouping))
    throw ConfigError(where + ".grouping: unknown grouping '" + c.grouping + "'");
  if (j.contains("groups")) {
    if (!j.at("groups").is_object()) throw ConfigError(where + ".groups: expected an object");
    for (const auto& [name, g] : j.at("groups").items()) {
      if (!g.is_number_integer()) throw ConfigError(where + ".groups." + name + ": expected an integer");
      c.groups[name] = g.get<int>();
    }
  } else if (c.grouping == "manual") {
    throw ConfigError(where + ": manual grouping needs a \"groups\" map");
  }
  return c;
}

inline Json configuration_to_json(const ConfigurationSpec& c) {
  Json groups = Json::object();
  for (const auto& [name, g] : c.groups) groups[name] = g;
  return {{"name", c.name}, {"grouping", c.grouping}, {"groups", groups}};
}

inline bool valid_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_';
  });
}

inline std::string absolute_from(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  fs::path q(p);
  if (q.is_relative()) q = base / q;
  return fs::weakly_canonical(q).string();
}

}  // namespace detail

/// Parses a configuration document. Groupings that are not given explicitly
/// are left empty; see resolve_groupings.
inline ExperimentConfig parse_config(const Json& j, const fs::path& base_dir) {
  using detail::get;
  detail::check_keys(j, "config",
                     {"name", "model", "plan", "configurations", "trials", "pop_size",
                      "reinit_fraction", "base_seed", "metrics", "sensitivity"});
  ExperimentConfig c;
  c.name = get<std::string>(j, "name", "config", c.name);
  if (!detail::valid_name(c.name)) throw ConfigError("name: use letters, digits, '-' or '_'");

  if (!j.contains("model")) throw ConfigError("model: missing");
  const auto& jm = j.at("model");
  detail::check_keys(jm, "model",
                     {"type", "cells", "seed", "days", "spinup_days", "observed", "forcing", "truth"});
  const auto type = get<std::string>(jm, "type", "model", "synthetic");
  auto& m = c.model;
  if (type == "synthetic")
    m.type = ModelConfig::Type::Synthetic;
  else if (type == "self")
    m.type = ModelConfig::Type::SelfSynthetic;
  else if (type == "external")
    m.type = ModelConfig::Type::External;
  else
    throw ConfigError("model.type: unknown model type '" + type + "'");
  m.cells = get<int>(jm, "cells", "model", m.cells);
  m.seed = get<std::uint64_t>(jm, "seed", "model", m.seed);
  m.days = get<std::size_t>(jm, "days", "model", m.days);
  m.spinup_days = get<std::size_t>(jm, "spinup_days", "model", m.spinup_days);
  if (m.type == ModelConfig::Type::External) {
    m.observed = detail::absolute_from(base_dir, get<std::string>(jm, "observed", "model", ""));
    m.forcing = detail::absolute_from(base_dir, get<std::string>(jm, "forcing", "model", ""));
    m.truth = detail::absolute_from(base_dir, get<std::string>(jm, "truth", "model", ""));
    for (const auto* key : {"observed", "forcing"})
      if (!jm.contains(key)) throw ConfigError(std::string("model.") + key + ": missing");
    for (const auto& [key, path] : {std::pair{"observed", m.observed}, std::pair{"forcing", m.forcing},
                                    std::pair{"truth", m.truth}})
      if (!path.empty() && !fs::exists(path))
        throw ConfigError(std::string("model.") + key + ": file '" + path + "' does not exist");
  }
  const int min_cells = m.type == ModelConfig::Type::Synthetic ? 3 : 1;
  if (m.cells < min_cells)
    throw ConfigError("model.cells: need at least " + std::to_string(min_cells) + " cells");

  if (j.contains("plan")) c.plan = detail::plan_from_json(j.at("plan"));

  if (!j.contains("configurations")) throw ConfigError("configurations: missing");
  Json jc = j.at("configurations");
  if (jc.is_string()) {
    const fs::path p = detail::absolute_from(base_dir, jc.get<std::string>());
    try {
      jc = Json::parse(read_text(p));
    } catch (const Json::parse_error& e) {
      throw ConfigError(p.string() + ": " + e.what());
    }
  }
  if (!jc.is_array() || jc.empty()) throw ConfigError("configurations: expected a non-empty array");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < jc.size(); ++i) {
    const std::string where = "configurations[" + std::to_string(i) + "]";
    auto spec = detail::configuration_from_json(jc[i], where);
    if (!detail::valid_name(spec.name)) throw ConfigError(where + ".name: use letters, digits, '-' or '_'");
    if (!seen.insert(spec.name).second) throw ConfigError(where + ": duplicate name '" + spec.name + "'");
    c.configurations.push_back(std::move(spec));
  }

  c.trials = get<int>(j, "trials", "config", c.trials);
  c.pop_size = get<std::size_t>(j, "pop_size", "config", c.pop_size);
  c.reinit_fraction = get<double>(j, "reinit_fraction", "config", c.reinit_fraction);
  c.base_seed = get<std::uint64_t>(j, "base_seed", "config", c.base_seed);
  if (c.trials < 1) throw ConfigError("trials: must be >= 1");
  if (c.pop_size < 2) throw ConfigError("pop_size: must be >= 2");
  if (!(c.reinit_fraction >= 0.0 && c.reinit_fraction <= 1.0))
    throw ConfigError("reinit_fraction: must lie in [0, 1]");

  if (j.contains("metrics")) {
    c.metrics.clear();
    const auto& jm2 = j.at("metrics");
    if (!jm2.is_array() || jm2.empty()) throw ConfigError("metrics: expected a non-empty array");
    for (std::size_t i = 0; i < jm2.size(); ++i) {
      const std::string where = "metrics[" + std::to_string(i) + "]";
      detail::check_keys(jm2[i], where, {"begin", "end"});
      MetricSpec ms{get<std::size_t>(jm2[i], "begin", where, 0), get<std::size_t>(jm2[i], "end", where, 0)};
      if (ms.end != 0 && ms.end <= ms.begin + 1) throw ConfigError(where + ": empty window");
      c.metrics.push_back(ms);
    }
  }
  if (j.contains("sensitivity")) {
    const auto& js = j.at("sensitivity");
    detail::check_keys(js, "sensitivity", {"threshold", "max_runs", "low", "high"});
    auto& s = c.sensitivity;
    s.threshold = get<double>(js, "threshold", "sensitivity", s.threshold);
    s.max_runs = get<long>(js, "max_runs", "sensitivity", s.max_runs);
    s.low = get<double>(js, "low", "sensitivity", s.low);
    s.high = get<double>(js, "high", "sensitivity", s.high);
    if (!(0.0 <= s.low && s.low < s.high && s.high <= 1.0))
      throw ConfigError("sensitivity: need 0 <= low < high <= 1");
    if (s.threshold < 0.0) throw ConfigError("sensitivity.threshold: must be >= 0");
  }
  return c;
}

/// Fully explicit form of a configuration; parse_config of it reproduces it.
inline Json config_to_json(const ExperimentConfig& c) {
  Json model = {{"type", to_string(c.model.type)},
                {"cells", c.model.cells},
                {"seed", c.model.seed},
                {"days", c.model.days},
                {"spinup_days", c.model.spinup_days}};
  if (c.model.type == ModelConfig::Type::External) {
    model["observed"] = c.model.observed;
    model["forcing"] = c.model.forcing;
    if (!c.model.truth.empty()) model["truth"] = c.model.truth;
  }
  Json configs = Json::array();
  for (const auto& s : c.configurations) configs.push_back(detail::configuration_to_json(s));
  Json metrics = Json::array();
  for (const auto& m : c.metrics) metrics.push_back({{"begin", m.begin}, {"end", m.end}});
  return {{"name", c.name},
          {"model", model},
          {"plan", detail::plan_to_json(c.plan)},
          {"configurations", configs},
          {"trials", c.trials},
          {"pop_size", c.pop_size},
          {"reinit_fraction", c.reinit_fraction},
          {"base_seed", c.base_seed},
          {"metrics", metrics},
          {"sensitivity",
           {{"threshold", c.sensitivity.threshold},
            {"max_runs", c.sensitivity.max_runs},
            {"low", c.sensitivity.low},
            {"high", c.sensitivity.high}}}};
}

// ---------------------------------------------------------------------------
// Watershed and objective

/// Everything needed to evaluate initial-model candidates against observations.
struct Watershed {
  int cells = 0;
  std::vector<toy::Region> regions;
  toy::Forcing forcing;
  std::vector<double> observed;
  std::vector<double> truth;  // model units per parameter, NaN where unknown
  std::size_t spinup = 0;
};

inline std::vector<double> read_truth_file(const fs::path& p, const ParameterSpace& space) {
  Json j;
  try {
    j = Json::parse(read_text(p));
  } catch (const Json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
  std::vector<double> t(space.size(), std::numeric_limits<double>::quiet_NaN());
  if (!j.contains("parameters") || !j.at("parameters").is_object())
    throw ConfigError(p.string() + ": expected a \"parameters\" object");
  for (std::size_t i = 0; i < space.size(); ++i)
    if (j.at("parameters").contains(space[i].name)) t[i] = j.at("parameters").at(space[i].name).get<double>();
  return t;
}

inline Watershed build_watershed(const ModelConfig& m) {
  Watershed w;
  w.cells = m.cells;
  w.spinup = m.spinup_days;
  const std::size_t dim = toy::dimension(m.cells);
  w.truth.assign(dim, std::numeric_limits<double>::quiet_NaN());
  switch (m.type) {
    case ModelConfig::Type::Synthetic: {
      auto t = toy::make_truth(m.cells, m.seed, m.days);
      const auto space = toy::initial_model_space(m.cells, &t.soil);
      for (std::size_t i = 0; i < dim; ++i)
        if (space[i].truth) w.truth[i] = *space[i].truth;
      w.regions = std::move(t.regions);
      w.forcing = std::move(t.forcing);
      w.observed = std::move(t.observed);
      break;
    }
    case ModelConfig::Type::SelfSynthetic: {
      w.regions = toy::regions_by_thirds(m.cells);
      w.forcing = toy::generate_forcing(m.days, mix64(m.seed ^ 0xf0f0f0f0ULL));
      Rng rng(mix64(m.seed));
      w.truth = toy::random_initial_vector(m.cells, rng);
      w.observed = toy::simulate_initial_vector(w.truth, w.regions, w.forcing);
      break;
    }
    case ModelConfig::Type::External: {
      w.regions = toy::regions_by_thirds(m.cells);
      const auto f = read_csv_columns(m.forcing, 3);
      w.forcing.precip = f[1];
      w.forcing.pet = f[2];
      w.observed = read_series_csv(m.observed);
      if (w.observed.size() != w.forcing.days())
        throw ConfigError("model: observed has " + std::to_string(w.observed.size()) +
                          " values but forcing has " + std::to_string(w.forcing.days()));
      if (!m.truth.empty()) w.truth = read_truth_file(m.truth, toy::initial_model_space(m.cells));
      break;
    }
  }
  if (w.observed.size() < w.spinup + 2)
    throw ConfigError("model: spinup_days leaves fewer than 2 scored days");
  return w;
}

/// Initial-model space with truths attached; every parameter in group 1.
inline ParameterSpace base_space(const Watershed& w) {
  auto params = toy::initial_model_space(w.cells).params();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (std::isfinite(w.truth[i])) params[i].truth = w.truth[i];
  return ParameterSpace(std::move(params), 1);
}

/// Search-scale assignment -> minimized metric vector.
inline ObjectiveFunction make_objective(std::shared_ptr<const Watershed> w, const ParameterSpace& space,
                                        std::vector<MetricSpec> metrics) {
  ModelFunction model = [w, space](std::span<const double> x) {
    return toy::simulate_initial_vector(space.to_model(x), w->regions, w->forcing);
  };
  return [w, model, metrics = std::move(metrics)](std::span<const double> x) {
    return evaluate_candidate(model, x, w->observed, metrics, w->spinup).values;
  };
}

// ---------------------------------------------------------------------------
// Screening and grouping

/// Factorial screening of the homogenized model: every cell shares one value
/// per parameter kind, plus the channel coefficient (7 factors).
struct Screening {
  std::vector<std::string> factors;
  FactorialDesign design;
  std::vector<std::vector<double>> points;  // model units, [run][factor]
  std::vector<double> responses;            // NSE
  std::vector<double> effects;
};

inline Screening screen_homogenized(const Watershed& w, const SensitivityConfig& s,
                                    const std::vector<MetricSpec>& metrics) {
  const int N = w.cells;
  const auto space = toy::initial_model_space(N);
  Screening sc;
  std::vector<std::size_t> first;  // representative parameter of each factor
  for (int k = 0; k < toy::kKinds; ++k) {
    sc.factors.push_back(toy::kKindNames[static_cast<std::size_t>(k)]);
    first.push_back(toy::param_index(N, static_cast<toy::Kind>(k), 0));
  }
  sc.factors.push_back("n_ch");
  first.push_back(toy::channel_index(N));
  const int k = static_cast<int>(sc.factors.size());
  sc.design = factorial_design(k, s.max_runs);

  std::vector<double> low, high;
  for (std::size_t f = 0; f < first.size(); ++f) {
    const auto& spec = space[first[f]];
    const auto r = original_range(spec);
    low.push_back(apply_scale(spec, r.lo + s.low * r.width(), Direction::ToModel));
    high.push_back(apply_scale(spec, r.lo + s.high * r.width(), Direction::ToModel));
  }
  sc.points = design_points(sc.design, low, high);
  const std::span<const double> obs(w.observed);
  const MetricSpec& m = metrics.front();
  for (const auto& p : sc.points) {
    std::vector<double> x(toy::dimension(N));
    for (int kind = 0; kind < toy::kKinds; ++kind)
      for (int c = 0; c < N; ++c)
        x[toy::param_index(N, static_cast<toy::Kind>(kind), c)] = p[static_cast<std::size_t>(kind)];
    x[toy::channel_index(N)] = p.back();
    const auto sim = toy::simulate_initial_vector(x, w.regions, w.forcing);
    const std::span<const double> s_sim(sim);
    const std::size_t b = w.spinup + m.begin;
    const std::size_t e = m.end ? w.spinup + m.end : sim.size();
    sc.responses.push_back(nse(s_sim.subspan(b, e - b), obs.subspan(b, e - b)));
  }
  sc.effects = main_effects(sc.design, sc.responses);
  return sc;
}

/// Per-parameter effects: every cell parameter inherits its kind's effect.
inline std::vector<RankedEffect> inherited_effects(const ParameterSpace& space, int cells,
                                                   const Screening& sc) {
  std::vector<RankedEffect> out;
  for (std::size_t i = 0; i < space.size(); ++i) {
    const std::size_t f = i < toy::channel_index(cells) ? i / static_cast<std::size_t>(cells)
                                                         : sc.factors.size() - 1;
    out.push_back({space[i].name, sc.effects[f]});
  }
  return out;
}

/// Cell order for region-based placement: downstream first, upstream first, or shuffled.
inline std::vector<int> cell_order(const std::string& grouping, int cells, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  if (grouping == "ranked-ud") std::reverse(order.begin(), order.end());
  if (grouping == "ranked-rand") {
    Rng rng(mix64(seed ^ hash_name_index("ranked-rand", 0)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  }
  return order;
}

/// Group map for one grouping kind.
///
/// "ranked" cuts the sensitivity ranking into g balanced groups. The region
/// kinds (g = 6) place the three most sensitive parameter kinds in groups 1-3
/// by region block of the cell order, the next two kinds in groups 4-5 by half
/// of the cell order, and the rest in group 6; the channel coefficient goes
/// where its own effect ranks. Insensitive parameters stay calibrated in the
/// last group.
inline GroupingResult grouping_for(const std::string& grouping, const ParameterSpace& space,
                                   const Watershed& w, const Screening& sc, int g,
                                   double threshold, std::uint64_t seed) {
  const auto effects = inherited_effects(space, w.cells, sc);
  if (grouping == "traditional") {
    GroupingResult r;
    for (const auto& e : effects) r.assignment.group[e.name] = 1;
    return r;
  }
  if (grouping == "ranked") {
    auto r = rank_and_group(effects, g, threshold);
    for (const auto& name : r.fixed) r.assignment.group[name] = g;
    return r;
  }
  if (g != 6) throw ConfigError("grouping '" + grouping + "' needs a plan with g = 6");
  const int N = w.cells;
  if (N < 3) throw ConfigError("grouping '" + grouping + "' needs at least 3 cells");

  std::vector<int> kinds(toy::kKinds);
  std::iota(kinds.begin(), kinds.end(), 0);
  std::stable_sort(kinds.begin(), kinds.end(), [&](int a, int b) {
    return std::abs(sc.effects[static_cast<std::size_t>(a)]) > std::abs(sc.effects[static_cast<std::size_t>(b)]);
  });
  const auto order = cell_order(grouping, N, seed);
  std::vector<std::size_t> blocks;
  {
    std::map<toy::Region, std::size_t> count;
    for (auto r : w.regions) ++count[r];
    blocks = {count[toy::Region::Down], count[toy::Region::Mid], count[toy::Region::Up]};
    if (grouping == "ranked-ud") std::reverse(blocks.begin(), blocks.end());
  }
  std::vector<int> block_of(static_cast<std::size_t>(N)), half_of(static_cast<std::size_t>(N));
  for (std::size_t pos = 0, b = 0, used = 0; pos < order.size(); ++pos) {
    while (used == blocks[b]) {
      ++b;
      used = 0;
    }
    block_of[static_cast<std::size_t>(order[pos])] = static_cast<int>(b);
    half_of[static_cast<std::size_t>(order[pos])] = pos < (order.size() + 1) / 2 ? 0 : 1;
    ++used;
  }
  std::map<std::string, int> placement;
  for (std::size_t rank = 0; rank < kinds.size(); ++rank) {
    for (int c = 0; c < N; ++c) {
      const auto name = toy::param_name(static_cast<toy::Kind>(kinds[rank]), c);
      int grp = 6;
      if (rank < 3) grp = 1 + block_of[static_cast<std::size_t>(c)];
      else if (rank < 5) grp = 4 + half_of[static_cast<std::size_t>(c)];
      placement[name] = grp;
    }
  }
  const double ch = std::abs(sc.effects.back());
  std::size_t above = 0;
  for (int kk = 0; kk < toy::kKinds; ++kk) above += std::abs(sc.effects[static_cast<std::size_t>(kk)]) > ch;
  placement["n_ch"] = above < 3 ? 1 : above == 3 ? 4 : above == 4 ? 5 : 6;

  const auto source = grouping == "ranked-du"   ? GroupingSource::RegionDU
                      : grouping == "ranked-ud" ? GroupingSource::RegionUD
                                                : GroupingSource::RegionRand;
  return rank_and_group(effects, 6, threshold, &placement, source);
}

/// Fills the group map of every configuration that has none; runs the
/// screening only when needed. Returns the screening when it ran.
inline std::optional<Screening> resolve_groupings(ExperimentConfig& c, const Watershed& w) {
  std::optional<Screening> sc;
  const auto space = base_space(w);
  for (auto& spec : c.configurations) {
    if (!spec.groups.empty()) continue;
    if (spec.grouping != "traditional" && !sc) sc = screen_homogenized(w, c.sensitivity, c.metrics);
    if (spec.grouping == "traditional") {
      for (std::size_t i = 0; i < space.size(); ++i) spec.groups[space[i].name] = 1;
      continue;
    }
    spec.groups = grouping_for(spec.grouping, space, w, *sc, c.plan.g, c.sensitivity.threshold,
                               c.base_seed)
                      .assignment.group;
  }
  return sc;
}

/// A configuration bound to its parameter space and plan.
struct PreparedConfiguration {
  ConfigurationSpec spec;
  ParameterSpace space;
  RunPlan plan;
};

inline PreparedConfiguration prepare_configuration(const ExperimentConfig& c, std::size_t index,
                                                   const ParameterSpace& base) {
  const auto& spec = c.configurations[index];
  const std::string where = "configurations[" + std::to_string(index) + "] '" + spec.name + "'";
  PreparedConfiguration p;
  p.spec = spec;
  p.plan = spec.traditional() ? traditional_plan(c.plan.total_budget(), c.plan.w) : c.plan;
  std::vector<int> groups(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto it = spec.groups.find(base[i].name);
    if (it == spec.groups.end()) throw ConfigError(where + ": parameter '" + base[i].name + "' has no group");
    groups[i] = it->second;
  }
  if (spec.groups.size() != base.size()) {
    for (const auto& [name, _] : spec.groups) {
      const bool known = std::any_of(base.params().begin(), base.params().end(),
                                     [&](const ParameterSpec& s) { return s.name == name; });
      if (!known) throw ConfigError(where + ": unknown parameter '" + name + "'");
    }
  }
  try {
    p.space = base.regrouped(groups, p.plan.g);
    require_valid(p.plan, p.space);
  } catch (const ArgumentError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  if (p.plan.runs.front().budget < static_cast<long>(c.pop_size))
    throw ConfigError(where + ": first run budget is smaller than pop_size");
  return p;
}

/// Parses, resolves and validates a configuration file.
inline ExperimentConfig load_config(const fs::path& path, std::optional<Screening>* screening = nullptr) {
  const std::string text = read_text(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw ConfigError(path.string() + ":" + std::to_string(line) + ": parse error: " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  auto c = parse_config(j, base);
  const auto w = build_watershed(c.model);
  auto sc = resolve_groupings(c, w);
  const auto space = base_space(w);
  for (std::size_t i = 0; i < c.configurations.size(); ++i) prepare_configuration(c, i, space);
  if (screening) *screening = std::move(sc);
  return c;
}

// ---------------------------------------------------------------------------
// Trial persistence

namespace detail {

inline Json candidate_to_json(const Candidate& c) {
  return {{"x", c.assignment},
          {"f", c.objectives ? Json(*c.objectives) : Json(nullptr)},
          {"origin", static_cast<int>(c.provenance)}};
}

inline Candidate candidate_from_json(const Json& j) {
  Candidate c;
  c.assignment = j.at("x").get<std::vector<double>>();
  if (!j.at("f").is_null()) c.objectives = j.at("f").get<std::vector<double>>();
  c.provenance = static_cast<Provenance>(j.at("origin").get<int>());
  return c;
}

}  // namespace detail

inline Json checkpoint_to_json(const CalibrationCheckpoint& cp) {
  Json pop = Json::array(), ar = Json::array(), ranges = Json::array();
  for (const auto& c : cp.population.members) pop.push_back(detail::candidate_to_json(c));
  for (const auto& c : cp.archive) ar.push_back(detail::candidate_to_json(c));
  for (const auto& r : cp.ranges) ranges.push_back({r.lo, r.hi});
  return {{"completed_runs", cp.completed_runs}, {"evaluations", cp.evaluations},
          {"population", pop},                    {"archive", ar},
          {"ranges", ranges},                     {"evolution", cp.evolution},
          {"survivor_history", cp.survivor_history}, {"rng_state", cp.rng_state}};
}

inline CalibrationCheckpoint checkpoint_from_json(const Json& j) {
  CalibrationCheckpoint cp;
  cp.completed_runs = j.at("completed_runs").get<int>();
  cp.evaluations = j.at("evaluations").get<long>();
  for (const auto& c : j.at("population")) cp.population.members.push_back(detail::candidate_from_json(c));
  for (const auto& c : j.at("archive")) cp.archive.push_back(detail::candidate_from_json(c));
  for (const auto& r : j.at("ranges")) cp.ranges.push_back({r[0].get<double>(), r[1].get<double>()});
  cp.evolution = j.at("evolution").get<std::vector<double>>();
  cp.survivor_history = j.at("survivor_history").get<std::vector<long>>();
  cp.rng_state = j.at("rng_state").get<std::string>();
  return cp;
}

struct ParameterBox {
  std::string name;
  int group = 1;
  BoxplotStats box;
  bool nc = false;
  bool hb = false;
};

struct TrialReport {
  std::string config;
  int trial = 0;
  std::uint64_t seed = 0;
  long evaluations = 0;
  std::vector<double> evolution;  // best-so-far NSE after each evaluation
  std::vector<Candidate> archive;
  std::vector<ParameterBox> boxes;
  int nc = 0;
  int hb = 0;
  double wall_seconds = 0.0;
  std::vector<std::vector<long>> run_survivors;

  double final_nse() const { return evolution.empty() ? std::numeric_limits<double>::quiet_NaN() : evolution.back(); }
};

inline std::string trial_stem(int trial) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "trial_%02d", trial);
  return buf;
}

inline std::uint64_t trial_seed(std::uint64_t base_seed, const std::string& config, int trial) {
  return base_seed ^ hash_name_index(config, static_cast<std::uint64_t>(trial));
}

/// Per-parameter boxplots of the archive in search scale with NC / HB flags.
inline std::vector<ParameterBox> archive_boxes(const ParameterSpace& space, const std::vector<Candidate>& archive) {
  std::vector<ParameterBox> out;
  const auto originals = space.original_ranges();
  for (std::size_t i = 0; i < space.size(); ++i) {
    std::vector<double> col;
    for (const auto& c : archive) col.push_back(c.assignment[i]);
    ParameterBox pb;
    pb.name = space[i].name;
    pb.group = space[i].group;
    pb.box = tukey_boxplot(col);
    pb.nc = nc_flag(pb.box, originals[i]);
    pb.hb = hb_flag(pb.box, originals[i]);
    out.push_back(std::move(pb));
  }
  return out;
}

inline std::string evolution_csv(const std::vector<double>& evolution) {
  std::string s = "evaluation,best_nse\n";
  for (std::size_t i = 0; i < evolution.size(); ++i)
    s += std::to_string(i + 1) + "," + format_double(evolution[i]) + "\n";
  return s;
}

inline Json trial_to_json(const TrialReport& t) {
  Json ar = Json::array(), boxes = Json::array();
  for (const auto& c : t.archive) ar.push_back(detail::candidate_to_json(c));
  for (const auto& b : t.boxes)
    boxes.push_back({{"parameter", b.name},
                     {"group", b.group},
                     {"q1", b.box.q1},
                     {"median", b.box.median},
                     {"q3", b.box.q3},
                     {"iqr", b.box.iqr},
                     {"lower_whisker", b.box.lower_whisker},
                     {"upper_whisker", b.box.upper_whisker},
                     {"nc", b.nc},
                     {"hb", b.hb}});
  return {{"configuration", t.config},  {"trial", t.trial},
          {"seed", t.seed},             {"evaluations", t.evaluations},
          {"final_nse", t.final_nse()}, {"nc", t.nc},
          {"hb", t.hb},                 {"archive", ar},
          {"boxplots", boxes},          {"run_survivors", t.run_survivors},
          {"wall_time_seconds", t.wall_seconds}};
}

/// Reads trial_XX.json and its evolution CSV from a configuration directory.
inline TrialReport read_trial(const fs::path& dir, int trial) {
  const auto stem = trial_stem(trial);
  const Json j = Json::parse(read_text(dir / (stem + ".json")));
  TrialReport t;
  t.config = j.at("configuration").get<std::string>();
  t.trial = j.at("trial").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.evaluations = j.at("evaluations").get<long>();
  t.nc = j.at("nc").get<int>();
  t.hb = j.at("hb").get<int>();
  t.wall_seconds = j.at("wall_time_seconds").get<double>();
  t.run_survivors = j.at("run_survivors").get<std::vector<std::vector<long>>>();
  for (const auto& c : j.at("archive")) t.archive.push_back(detail::candidate_from_json(c));
  for (const auto& b : j.at("boxplots")) {
    ParameterBox pb;
    pb.name = b.at("parameter").get<std::string>();
    pb.group = b.at("group").get<int>();
    pb.box.q1 = b.at("q1").get<double>();
    pb.box.median = b.at("median").get<double>();
    pb.box.q3 = b.at("q3").get<double>();
    pb.box.iqr = b.at("iqr").get<double>();
    pb.box.lower_whisker = b.at("lower_whisker").get<double>();
    pb.box.upper_whisker = b.at("upper_whisker").get<double>();
    pb.nc = b.at("nc").get<bool>();
    pb.hb = b.at("hb").get<bool>();
    t.boxes.push_back(std::move(pb));
  }
  t.evolution = read_csv_columns(dir / ("evolution_" + stem + ".csv"), 2)[1];
  return t;
}

// ---------------------------------------------------------------------------
// Running an experiment

struct RunOptions {
  unsigned jobs = 1;    // concurrent trials
  bool resume = true;   // reuse finished trials and checkpoints found in the output
  int trials = 0;       // overrides the configured trial count when positive
  /// Replaces the objective of one (configuration, trial); used for fault injection.
  std::function<ObjectiveFunction(const std::string&, int, ObjectiveFunction)> wrap_objective;
  std::function<void(const std::string&)> progress;
};

struct TrialOutcome {
  std::string config;
  int trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  bool reused = false;
  std::string error;
  double final_nse = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

/// Runs one trial and persists its report; failures leave a failure record
/// and the last checkpoint behind.
inline TrialOutcome run_trial(const ExperimentConfig& c, const PreparedConfiguration& p,
                              std::shared_ptr<const Watershed> w, int trial, const fs::path& dir,
                              const RunOptions& opt) {
  TrialOutcome o;
  o.config = p.spec.name;
  o.trial = trial;
  o.seed = trial_seed(c.base_seed, p.spec.name, trial);
  const auto stem = trial_stem(trial);
  const fs::path report_path = dir / (stem + ".json");
  const fs::path cp_path = dir / ("checkpoint_" + stem + ".json");
  const fs::path fail_path = dir / ("failure_" + stem + ".json");

  if (opt.resume && fs::exists(report_path)) {
    const auto t = read_trial(dir, trial);
    o.ok = true;
    o.reused = true;
    o.final_nse = t.final_nse();
    o.wall_seconds = t.wall_seconds;
    return o;
  }
  std::optional<CalibrationCheckpoint> resume;
  if (opt.resume && fs::exists(cp_path)) resume = checkpoint_from_json(Json::parse(read_text(cp_path)));
  fs::remove(fail_path);

  ObjectiveFunction f = make_objective(w, p.space, c.metrics);
  if (opt.wrap_objective) f = opt.wrap_objective(p.spec.name, trial, f);
  OptimizerSettings s;
  s.pop_size = c.pop_size;
  s.reinit_fraction = c.reinit_fraction;

  const auto t0 = std::chrono::steady_clock::now();
  try {
    const auto res = run_calibration(f, p.space, p.plan, s, o.seed, resume ? &*resume : nullptr,
                                     [&](const CalibrationCheckpoint& cp) {
                                       write_text(cp_path, checkpoint_to_json(cp).dump());
                                     });
    TrialReport t;
    t.config = p.spec.name;
    t.trial = trial;
    t.seed = o.seed;
    t.evaluations = res.evaluations;
    for (double e : res.evolution) t.evolution.push_back(from_minimized(e));
    t.archive = res.archive.members();
    t.boxes = archive_boxes(p.space, t.archive);
    for (const auto& b : t.boxes) {
      t.nc += b.nc;
      t.hb += b.hb;
    }
    t.run_survivors = res.run_survivors;
    t.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text(dir / ("evolution_" + stem + ".csv"), evolution_csv(t.evolution));
    write_text(report_path, trial_to_json(t).dump(1));
    fs::remove(cp_path);
    o.ok = true;
    o.final_nse = t.final_nse();
    o.wall_seconds = t.wall_seconds;
  } catch (const TrialAborted& e) {
    o.error = e.what();
    Json rec = {{"configuration", o.config},
                {"trial", trial},
                {"seed", o.seed},
                {"error", o.error},
                {"completed_runs", e.checkpoint().completed_runs},
                {"assignment", e.assignment()}};
    write_text(fail_path, rec.dump(1));
  } catch (const std::exception& e) {
    o.error = e.what();
    write_text(fail_path, Json({{"configuration", o.config}, {"trial", trial}, {"seed", o.seed},
                                {"error", o.error}})
                              .dump(1));
  }
  return o;
}

/// Runs every configuration x trial into `out`. Trials are independent, so
/// results do not depend on `jobs` or on completion order.
inline std::vector<TrialOutcome> run_experiment(const ExperimentConfig& c, const fs::path& out,
                                                const RunOptions& opt = {}) {
  fs::create_directories(out);
  const fs::path resolved = out / "resolved_config.json";
  const std::string dump = config_to_json(c).dump(2) + "\n";
  if (fs::exists(resolved) && read_text(resolved) != dump) {
    if (opt.resume)
      throw ConfigError("output directory '" + out.string() + "' holds results of a different configuration");
  }
  write_text(resolved, dump);

  auto w = std::make_shared<const Watershed>(build_watershed(c.model));
  const auto base = base_space(*w);
  std::vector<PreparedConfiguration> prepared;
  for (std::size_t i = 0; i < c.configurations.size(); ++i) prepared.push_back(prepare_configuration(c, i, base));

  const int trials = opt.trials > 0 ? opt.trials : c.trials;
  std::vector<std::pair<std::size_t, int>> jobs;
  for (std::size_t i = 0; i < prepared.size(); ++i)
    for (int t = 1; t <= trials; ++t) jobs.emplace_back(i, t);
  std::vector<TrialOutcome> outcomes(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    for (std::size_t k; (k = next.fetch_add(1)) < jobs.size();) {
      const auto& [ci, t] = jobs[k];
      outcomes[k] = run_trial(c, prepared[ci], w, t, out / prepared[ci].spec.name, opt);
      if (opt.progress) {
        const auto& o = outcomes[k];
        std::lock_guard lock(log_mutex);
        opt.progress(o.config + " " + trial_stem(o.trial) + ": " +
                     (o.ok ? "NSE " + format_double(o.final_nse) + (o.reused ? " (reused)" : "")
                           : "FAILED: " + o.error));
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const unsigned n = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(jobs.size())));
    for (unsigned j = 0; j < n; ++j) pool.emplace_back(worker);
  }

  std::string csv = "configuration,trial,seed,status,final_nse\n";
  for (const auto& o : outcomes)
    csv += o.config + "," + std::to_string(o.trial) + "," + std::to_string(o.seed) + "," +
           (o.ok ? "ok" : "failed") + "," + format_double(o.final_nse) + "\n";
  write_text(out / "trials.csv", csv);
  return outcomes;
}

// ---------------------------------------------------------------------------
// Truth bundle for external use

/// Writes truth.json, observed.csv and forcing.csv for a synthetic watershed.
inline void write_truth_bundle(int cells, std::uint64_t seed, std::size_t days, const fs::path& out) {
  const auto t = toy::make_truth(cells, seed, days);
  const auto space = toy::initial_model_space(cells, &t.soil);
  Json params = Json::object();
  for (std::size_t i = 0; i < space.size(); ++i)
    if (space[i].truth) params[space[i].name] = *space[i].truth;
  Json regions = Json::array();
  for (auto r : t.regions) regions.push_back(toy::to_string(r));
  const Json truth = {{"cells", cells}, {"seed", seed},       {"days", days},
                      {"b", t.b},       {"regions", regions}, {"parameters", params}};
  write_text(out / "truth.json", truth.dump(2) + "\n");
  std::string obs = "day,flow\n", forc = "day,precip,pet\n";
  for (std::size_t d = 0; d < t.observed.size(); ++d) {
    obs += std::to_string(d) + "," + format_double(t.observed[d]) + "\n";
    forc += std::to_string(d) + "," + format_double(t.forcing.precip[d]) + "," +
            format_double(t.forcing.pet[d]) + "\n";
  }
  write_text(out / "observed.csv", obs);
  write_text(out / "forcing.csv", forc);
}

/// Writes the design matrix with responses, the effect ranking and the group
/// map of every configuration (a "configurations" array usable by calibrate).
inline void write_screening(const ExperimentConfig& c, const Screening& sc, const fs::path& out) {
  std::string design = "run";
  for (const auto& f : sc.factors) design += "," + f;
  design += ",nse\n";
  for (std::size_t r = 0; r < sc.points.size(); ++r) {
    design += std::to_string(r + 1);
    for (double v : sc.points[r]) design += "," + format_double(v);
    design += "," + format_double(sc.responses[r]) + "\n";
  }
  write_text(out / "design.csv", design);

  std::vector<std::size_t> order(sc.factors.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(sc.effects[a]) > std::abs(sc.effects[b]);
  });
  std::string eff = "rank,factor,effect,abs_effect\n";
  for (std::size_t r = 0; r < order.size(); ++r)
    eff += std::to_string(r + 1) + "," + sc.factors[order[r]] + "," + format_double(sc.effects[order[r]]) +
           "," + format_double(std::abs(sc.effects[order[r]])) + "\n";
  write_text(out / "effects.csv", eff);

  Json configs = Json::array();
  for (const auto& s : c.configurations) configs.push_back(detail::configuration_to_json(s));
  Json gen = Json::array();
  for (const auto& g : sc.design.generators) gen.push_back(g);
  write_text(out / "groups.json", configs.dump(2) + "\n");
  write_text(out / "design.json", Json({{"factors", sc.factors}, {"runs", sc.design.runs()},
                                        {"generators", gen}}).dump(2) + "\n");
}

}  // namespace mhcal
