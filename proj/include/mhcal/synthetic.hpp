#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mhcal/errors.hpp"
#include "mhcal/parameter_space.hpp"
#include "mhcal/random.hpp"

// Toy double-model watershed: a reference bucket model that produces synthetic
// observations and a structurally different initial model that gets calibrated.
namespace mhcal::toy {

struct Forcing {
  std::vector<double> precip;  // mm/day
  std::vector<double> pet;     // mm/day

  std::size_t days() const { return precip.size(); }
  bool operator==(const Forcing&) const = default;
};

inline double pet_at(std::size_t t) {
  return std::max(0.0, 2.0 + 1.5 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / 365.0));
}

/// Wet days with probability 0.3, exponential depths with mean 8 mm, sinusoidal PET.
inline Forcing generate_forcing(std::size_t days, std::uint64_t seed) {
  if (days < 730) throw ArgumentError("generate_forcing: need at least 730 days");
  Rng rng(seed);
  Forcing f;
  f.precip.resize(days);
  f.pet.resize(days);
  for (std::size_t t = 0; t < days; ++t) {
    const bool wet = rng.bernoulli(0.3);
    const double depth = rng.exponential(8.0);
    f.precip[t] = wet ? depth : 0.0;
    f.pet[t] = pet_at(t);
  }
  return f;
}

enum class Region { Down, Mid, Up };

inline const char* to_string(Region r) {
  switch (r) {
    case Region::Down: return "down";
    case Region::Mid: return "mid";
    case Region::Up: return "up";
  }
  return "?";
}

inline int delay_days(Region r) { return r == Region::Down ? 0 : r == Region::Mid ? 1 : 2; }

/// First ceil(N/3) cells downstream, the next ceil(N/3) midstream, the rest upstream.
inline std::vector<Region> regions_by_thirds(int cells) {
  const int third = (cells + 2) / 3;
  std::vector<Region> out;
  for (int i = 0; i < cells; ++i)
    out.push_back(i < third ? Region::Down : i < 2 * third ? Region::Mid : Region::Up);
  return out;
}

/// Shared soil parameters of one cell.
struct SoilParams {
  double capacity = 200.0;       // C, mm
  double field_capacity = 0.5;   // f, fraction
  double wilting = 0.2;          // w, fraction
  double conductivity = 1.0;     // k, mm/day
  bool operator==(const SoilParams&) const = default;
};

/// Initial-model-only parameters of one cell.
struct SubsurfaceParams {
  double percolation_exponent = 3.0;  // m
  double recession = 0.1;             // a, 1/day
  bool operator==(const SubsurfaceParams&) const = default;
};

// Calibration bounds of the initial model (model units).
inline constexpr double kCapacityLow = 50.0, kCapacityHigh = 400.0;
inline constexpr double kFieldLow = 0.3, kFieldHigh = 0.8;
inline constexpr double kWiltingLow = 0.05, kWiltingHigh = 0.7;
inline constexpr double kConductivityLow = 0.1, kConductivityHigh = 20.0;
inline constexpr double kExponentLow = 1.0, kExponentHigh = 6.0;
inline constexpr double kRecessionLow = 0.01, kRecessionHigh = 0.5;
inline constexpr double kChannelLow = 0.05, kChannelHigh = 1.0;
inline constexpr double kReferenceExponent = 0.4;

/// Per-cell, per-day water accounting of one simulation.
struct CellDay {
  double precip, et, quickflow, drainage, outflow;
  double soil_before, soil_after, ground_before, ground_after;
  bool clamped;
};

struct Trace {
  std::vector<std::vector<CellDay>> cells;  // [cell][day]
};

inline void check_soil(const SoilParams& p, bool reference) {
  if (!(p.capacity > 0.0)) throw ArgumentError("capacity must be positive");
  if (!(p.conductivity > 0.0)) throw ArgumentError("conductivity must be positive");
  if (!(p.field_capacity > 0.0 && p.field_capacity < 1.0))
    throw ArgumentError("field capacity must lie in (0, 1)");
  if (!(p.wilting > 0.0 && p.wilting < 1.0)) throw ArgumentError("wilting point must lie in (0, 1)");
  if (reference && !(p.wilting < p.field_capacity))
    throw ArgumentError("reference model needs wilting < field capacity");
}

/// Reference model: power-law quickflow, linear baseflow, instantaneous routing.
inline std::vector<double> simulate_reference(std::span<const SoilParams> cells, double b,
                                              const Forcing& forcing, Trace* trace = nullptr) {
  if (cells.empty()) throw ArgumentError("simulate_reference: no cells");
  if (!(b > 0.0)) throw ArgumentError("simulate_reference: exponent must be positive");
  for (const auto& c : cells) check_soil(c, true);
  const std::size_t T = forcing.days();
  std::vector<double> flow(T, 0.0);
  if (trace) trace->cells.assign(cells.size(), {});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& p = cells[i];
    double s = 0.5 * p.capacity;
    if (trace) trace->cells[i].reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      const double P = forcing.precip[t];
      const double sat = s / p.capacity;
      const double qd = sat > 0.0 ? P * std::pow(sat, b) : 0.0;
      const double et = forcing.pet[t] *
                        std::clamp((sat - p.wilting) / (p.field_capacity - p.wilting), 0.0, 1.0);
      const double qb = p.conductivity * sat;
      const double raw = s + P - qd - et - qb;
      const double next = std::clamp(raw, 0.0, p.capacity);
      flow[t] += qd + qb;
      if (trace)
        trace->cells[i].push_back({P, et, qd, qb, qd + qb, s, next, 0.0, 0.0, next != raw});
      s = next;
    }
  }
  for (double& q : flow) q /= static_cast<double>(cells.size());
  return flow;
}

/// Initial model: saturation-excess quickflow, threshold ET, nonlinear percolation
/// into a linear groundwater store, region delays and a smoothed channel.
inline std::vector<double> simulate_initial(std::span<const SoilParams> soil,
                                            std::span<const SubsurfaceParams> sub,
                                            double channel, std::span<const Region> regions,
                                            const Forcing& forcing, Trace* trace = nullptr) {
  const std::size_t N = soil.size();
  if (N == 0) throw ArgumentError("simulate_initial: no cells");
  if (sub.size() != N || regions.size() != N)
    throw ArgumentError("simulate_initial: per-cell parameter counts differ");
  if (!(channel > 0.0 && channel <= 1.0))
    throw ArgumentError("simulate_initial: channel smoothing must lie in (0, 1]");
  for (const auto& c : soil) check_soil(c, false);
  for (const auto& s : sub) {
    if (!(s.percolation_exponent > 0.0)) throw ArgumentError("percolation exponent must be positive");
    if (!(s.recession > 0.0 && s.recession <= 1.0))
      throw ArgumentError("groundwater recession must lie in (0, 1]");
  }
  const std::size_t T = forcing.days();
  std::vector<double> delayed(T, 0.0);
  if (trace) trace->cells.assign(N, {});
  for (std::size_t i = 0; i < N; ++i) {
    const auto& p = soil[i];
    const auto& q = sub[i];
    const auto d = static_cast<std::size_t>(delay_days(regions[i]));
    const double excess_width = (1.0 - p.field_capacity) * p.capacity;
    double s = 0.5 * p.capacity;
    double gw = 0.0;
    if (trace) trace->cells[i].reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      const double P = forcing.precip[t];
      const double sat = s / p.capacity;
      const double qd =
          P * std::clamp((s - p.field_capacity * p.capacity) / excess_width, 0.0, 1.0);
      const double et = sat > p.wilting ? forcing.pet[t] * sat : 0.0;
      const double perc = sat > 0.0 ? p.conductivity * std::pow(sat, q.percolation_exponent) : 0.0;
      const double raw = s + P - qd - et - perc;
      const double next = std::clamp(raw, 0.0, p.capacity);
      const double qb = q.recession * gw;
      const double gw_next = gw + perc - qb;
      if (t + d < T) delayed[t + d] += qd + qb;
      if (trace)
        trace->cells[i].push_back({P, et, qd, perc, qd + qb, s, next, gw, gw_next, next != raw});
      s = next;
      gw = gw_next;
    }
  }
  std::vector<double> flow(T);
  double prev = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    prev = (1.0 - channel) * prev + channel * delayed[t] / static_cast<double>(N);
    flow[t] = prev;
  }
  return flow;
}

/// Layout of the initial model's parameter vector (6N + 1 entries):
/// C[0..N), f[0..N), w[0..N), k[0..N), m[0..N), a[0..N), channel.
enum class Kind { Capacity = 0, Field, Wilting, Conductivity, Exponent, Recession };
inline constexpr int kKinds = 6;
inline constexpr std::array<const char*, kKinds> kKindNames = {"C", "f", "w", "k", "m", "a"};

inline std::size_t param_index(int cells, Kind kind, int cell) {
  return static_cast<std::size_t>(static_cast<int>(kind) * cells + cell);
}
inline std::size_t channel_index(int cells) { return static_cast<std::size_t>(kKinds * cells); }
inline std::size_t dimension(int cells) { return channel_index(cells) + 1; }

/// Parameter name such as "f_07" (cell ids are 1-based) or "n_ch".
inline std::string param_name(Kind kind, int cell) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%02d", kKindNames[static_cast<std::size_t>(kind)], cell + 1);
  return buf;
}

inline std::vector<double> simulate_initial_vector(std::span<const double> x,
                                                   std::span<const Region> regions,
                                                   const Forcing& forcing,
                                                   Trace* trace = nullptr) {
  const int N = static_cast<int>(regions.size());
  if (x.size() != dimension(N))
    throw ArgumentError("simulate_initial: expected " + std::to_string(dimension(N)) +
                        " parameters, got " + std::to_string(x.size()));
  std::vector<SoilParams> soil(static_cast<std::size_t>(N));
  std::vector<SubsurfaceParams> sub(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    auto& s = soil[static_cast<std::size_t>(i)];
    s.capacity = x[param_index(N, Kind::Capacity, i)];
    s.field_capacity = x[param_index(N, Kind::Field, i)];
    s.wilting = x[param_index(N, Kind::Wilting, i)];
    s.conductivity = x[param_index(N, Kind::Conductivity, i)];
    auto& u = sub[static_cast<std::size_t>(i)];
    u.percolation_exponent = x[param_index(N, Kind::Exponent, i)];
    u.recession = x[param_index(N, Kind::Recession, i)];
  }
  return simulate_initial(soil, sub, x[channel_index(N)], regions, forcing, trace);
}

struct WatershedTruth {
  int cells = 0;
  std::vector<SoilParams> soil;
  double b = kReferenceExponent;
  std::vector<Region> regions;
  Forcing forcing;
  std::vector<double> observed;
};

/// Draws per-cell soil truths within the calibration bounds, simulates the
/// reference model and stores its outlet flow as the observations.
inline WatershedTruth make_truth(int cells, std::uint64_t seed, std::size_t days = 1095) {
  if (cells < 3) throw ArgumentError("make_truth: need at least 3 cells");
  WatershedTruth w;
  w.cells = cells;
  w.regions = regions_by_thirds(cells);
  w.forcing = generate_forcing(days, mix64(seed ^ 0xf0f0f0f0ULL));
  Rng rng(mix64(seed));
  const double klo = std::log10(kConductivityLow);
  const double khi = std::log10(kConductivityHigh);
  for (int i = 0; i < cells; ++i) {
    SoilParams p;
    p.capacity = rng.uniform(kCapacityLow, kCapacityHigh);
    p.field_capacity = rng.uniform(kFieldLow, kFieldHigh);
    p.wilting = rng.uniform(kWiltingLow, p.field_capacity - 0.1);
    p.conductivity = std::pow(10.0, rng.uniform(klo, khi));
    w.soil.push_back(p);
  }
  w.observed = simulate_reference(w.soil, w.b, w.forcing);
  return w;
}

/// Parameter space of the initial model; truths (when given) cover the shared
/// soil parameters only. All parameters start in group 1.
inline ParameterSpace initial_model_space(int cells, const std::vector<SoilParams>* truth = nullptr) {
  std::vector<ParameterSpec> specs(dimension(cells));
  struct Bounds { double lo, hi; Scale scale; };
  const std::array<Bounds, kKinds> bounds = {{{kCapacityLow, kCapacityHigh, Scale::Linear},
                                              {kFieldLow, kFieldHigh, Scale::Linear},
                                              {kWiltingLow, kWiltingHigh, Scale::Linear},
                                              {kConductivityLow, kConductivityHigh, Scale::Log10},
                                              {kExponentLow, kExponentHigh, Scale::Linear},
                                              {kRecessionLow, kRecessionHigh, Scale::Linear}}};
  for (int kind = 0; kind < kKinds; ++kind) {
    for (int i = 0; i < cells; ++i) {
      auto& s = specs[param_index(cells, static_cast<Kind>(kind), i)];
      s.name = param_name(static_cast<Kind>(kind), i);
      s.low = bounds[static_cast<std::size_t>(kind)].lo;
      s.high = bounds[static_cast<std::size_t>(kind)].hi;
      s.scale = bounds[static_cast<std::size_t>(kind)].scale;
      s.group = 1;
      if (truth && kind < 4) {
        const auto& t = (*truth)[static_cast<std::size_t>(i)];
        const double vals[] = {t.capacity, t.field_capacity, t.wilting, t.conductivity};
        s.truth = vals[kind];
      }
    }
  }
  auto& ch = specs[channel_index(cells)];
  ch.name = "n_ch";
  ch.low = kChannelLow;
  ch.high = kChannelHigh;
  return ParameterSpace(std::move(specs), 1);
}

/// Initial-model parameter vector with the given soil values and mid-range
/// values for every initial-only parameter.
inline std::vector<double> initial_vector_from_soil(std::span<const SoilParams> soil) {
  const int N = static_cast<int>(soil.size());
  std::vector<double> x(dimension(N));
  for (int i = 0; i < N; ++i) {
    const auto& s = soil[static_cast<std::size_t>(i)];
    x[param_index(N, Kind::Capacity, i)] = s.capacity;
    x[param_index(N, Kind::Field, i)] = s.field_capacity;
    x[param_index(N, Kind::Wilting, i)] = s.wilting;
    x[param_index(N, Kind::Conductivity, i)] = s.conductivity;
    x[param_index(N, Kind::Exponent, i)] = 0.5 * (kExponentLow + kExponentHigh);
    x[param_index(N, Kind::Recession, i)] = 0.5 * (kRecessionLow + kRecessionHigh);
  }
  x[channel_index(N)] = 0.5 * (kChannelLow + kChannelHigh);
  return x;
}

/// Random initial-model parameter vector (model units) within the calibration bounds.
inline std::vector<double> random_initial_vector(int cells, Rng& rng) {
  const auto space = initial_model_space(cells);
  std::vector<double> x(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto r = original_range(space[i]);
    x[i] = apply_scale(space[i], rng.uniform(r.lo, r.hi), Direction::ToModel);
  }
  return x;
}

}  // namespace mhcal::toy
