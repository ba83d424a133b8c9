#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mhcal/errors.hpp"

namespace mhcal {

/// Black-box model: parameter vector in model units -> simulated output series.
using ModelFunction = std::function<std::vector<double>(std::span<const double>)>;

struct ObjectiveRecord {
  std::vector<double> values;  // minimized
  std::vector<std::string> labels;
};

/// Nash-Sutcliffe efficiency. Throws DomainError when observed has zero variance.
inline double nse(std::span<const double> simulated, std::span<const double> observed) {
  if (simulated.size() != observed.size())
    throw ArgumentError("nse: series lengths differ");
  if (observed.size() < 2) throw ArgumentError("nse: need at least 2 values");
  double mean = 0.0;
  for (double o : observed) mean += o;
  mean /= static_cast<double>(observed.size());
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    num += (simulated[i] - observed[i]) * (simulated[i] - observed[i]);
    den += (observed[i] - mean) * (observed[i] - mean);
  }
  if (!(den > 0.0)) throw DomainError("nse: observed series has zero variance");
  return 1.0 - num / den;
}

inline double to_minimized(double nse_value) { return 1.0 - nse_value; }
inline double from_minimized(double error) { return 1.0 - error; }

/// One configured error metric: NSE over [begin, end) of the scored window.
/// end == 0 means "to the end of the series".
struct MetricSpec {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::string label() const {
    if (begin == 0 && end == 0) return "NSE";
    return "NSE[" + std::to_string(begin) + ":" + (end ? std::to_string(end) : "") + "]";
  }
  bool operator==(const MetricSpec&) const = default;
};

/// Runs the model once and scores it against observed, skipping the first
/// spinup values of both series. Every metric is returned in minimized form.
inline ObjectiveRecord evaluate_candidate(const ModelFunction& model,
                                          std::span<const double> assignment,
                                          std::span<const double> observed,
                                          std::span<const MetricSpec> metrics,
                                          std::size_t spinup = 0) {
  std::vector<double> sim;
  try {
    sim = model(assignment);
  } catch (const EvaluationError&) {
    throw;
  } catch (const std::exception& e) {
    throw EvaluationError(std::string("model failed: ") + e.what(),
                          {assignment.begin(), assignment.end()});
  }
  if (sim.size() != observed.size())
    throw EvaluationError("model output length " + std::to_string(sim.size()) +
                              " does not match observed length " +
                              std::to_string(observed.size()),
                          {assignment.begin(), assignment.end()});
  for (double v : sim)
    if (!std::isfinite(v))
      throw EvaluationError("model produced non-finite output",
                            {assignment.begin(), assignment.end()});
  if (spinup >= sim.size()) throw ArgumentError("spin-up covers the whole series");

  ObjectiveRecord rec;
  const std::span<const double> s = std::span<const double>(sim).subspan(spinup);
  const std::span<const double> o = observed.subspan(spinup);
  for (const auto& m : metrics) {
    const std::size_t end = m.end ? std::min(m.end, s.size()) : s.size();
    if (m.begin + 2 > end) throw ArgumentError("metric window too short: " + m.label());
    const double v = to_minimized(nse(s.subspan(m.begin, end - m.begin),
                                      o.subspan(m.begin, end - m.begin)));
    if (!std::isfinite(v))
      throw EvaluationError("non-finite objective " + m.label(),
                            {assignment.begin(), assignment.end()});
    rec.values.push_back(v);
    rec.labels.push_back(m.label());
  }
  return rec;
}

/// Two-column CSV (index, value). A header line is skipped if present.
inline std::vector<double> read_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open series file '" + path + "'");
  std::vector<double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw ArgumentError(path + ":" + std::to_string(lineno) + ": expected two columns");
    const std::string cell = line.substr(comma + 1);
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str()) {
      if (lineno == 1) continue;  // header
      throw ArgumentError(path + ":" + std::to_string(lineno) + ": not a number");
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace mhcal
