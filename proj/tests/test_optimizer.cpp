#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "mhcal/optimizer.hpp"
#include "oracles.hpp"

using namespace mhcal;

namespace {

ParameterSpace unit_space(int n, int groups) {
  std::vector<ParameterSpec> specs;
  for (int i = 0; i < n; ++i)
    specs.push_back({"x" + std::to_string(i), 0.0, 1.0, Scale::Linear, 1 + i % groups, {}});
  return ParameterSpace(specs, groups);
}

/// Mixed layout: dims 0..2 continuous on different ranges, dims 3..4 discrete.
SearchLayout mixed_layout() {
  std::vector<Dimension> dims;
  dims.push_back({{0.0, 1.0}, ResolutionMode::full(), {}});
  dims.push_back({{-2.0, 3.0}, ResolutionMode::shrunk(), {}});
  dims.push_back({{0.1, 0.7}, ResolutionMode::shrunk(), {}});
  dims.push_back({{0.0, 1.0}, ResolutionMode::discrete(5), discrete_points({0.0, 1.0}, 5)});
  dims.push_back({{10.0, 20.0}, ResolutionMode::discrete(2), discrete_points({10.0, 20.0}, 2)});
  return SearchLayout(std::move(dims));
}

Objectives sphere(std::span<const double> x) {
  double s = 0;
  for (double v : x) s += (v - 0.3) * (v - 0.3);
  return {s};
}

Population evaluated_population(const SearchLayout& layout, std::size_t n, Rng& rng) {
  Population p = initialize_population(layout, n, nullptr, 0.0, rng);
  for (auto& m : p.members) m.objectives = sphere(m.assignment);
  return p;
}

}  // namespace

// --- initialize_population ---------------------------------------------------

TEST(InitializePopulation, FreshMembersAreRandom) {
  Rng rng(1);
  const auto layout = mixed_layout();
  const auto pop = initialize_population(layout, 50, nullptr, 0.2, rng);
  ASSERT_EQ(pop.size(), 50u);
  for (const auto& m : pop.members) {
    EXPECT_EQ(m.provenance, Provenance::RandomInit);
    EXPECT_FALSE(m.evaluated());
    EXPECT_TRUE(layout.admits(m.assignment));
  }
  EXPECT_THROW(initialize_population(layout, 1, nullptr, 0.2, rng), ArgumentError);
}

TEST(InitializePopulation, CarryoverSplit) {
  Rng rng(2);
  const auto layout = mixed_layout();
  const auto prev = evaluated_population(layout, 50, rng);
  const auto pop = initialize_population(layout, 50, &prev, 0.2, rng);
  const auto carried = std::count_if(pop.members.begin(), pop.members.end(), [](const Candidate& c) {
    return c.provenance == Provenance::Carryover;
  });
  EXPECT_EQ(carried, 40);
  EXPECT_EQ(pop.size(), 50u);
  // Members that did not move keep their objectives.
  for (const auto& m : pop.members)
    if (m.provenance == Provenance::Carryover) {
      EXPECT_TRUE(m.evaluated());
    }
}

TEST(InitializePopulation, CarryoverIsReprojected) {
  Rng rng(3);
  Population prev;
  prev.members.push_back({{0.95, 0.55}, Objectives{1.0}, Provenance::RandomInit});
  prev.members.push_back({{0.2, 0.33}, Objectives{2.0}, Provenance::RandomInit});
  std::vector<Dimension> narrow = {{{0.1, 0.7}, ResolutionMode::shrunk(), {}},
                                   {{0.0, 1.0}, ResolutionMode::discrete(2),
                                    discrete_points({0.0, 1.0}, 2)}};
  const SearchLayout layout(narrow);
  const auto pop = initialize_population(layout, 2, &prev, 0.0, rng);
  EXPECT_EQ(pop.members[0].assignment[0], 0.7);
  EXPECT_EQ(pop.members[0].assignment[1], 2.0 / 3.0);
  EXPECT_FALSE(pop.members[0].evaluated());
  EXPECT_EQ(pop.members[1].assignment[1], 1.0 / 3.0);
}

// --- nondominated sort / crowding --------------------------------------------

TEST(NondominatedSort, Examples) {
  const std::vector<Objectives> pts = {{1, 1}, {1, 2}, {2, 1}, {2, 2}};
  const auto f = nondominated_sort(pts);
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0], (std::vector<std::size_t>{0}));
  EXPECT_EQ(f[1], (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(f[2], (std::vector<std::size_t>{3}));

  const std::vector<Objectives> single = {{3}, {1}, {2}};
  const auto g = nondominated_sort(single);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0][0], 1u);
  EXPECT_EQ(g[1][0], 2u);
  EXPECT_EQ(g[2][0], 0u);

  const std::vector<Objectives> same(5, Objectives{1.0, 2.0});
  EXPECT_EQ(nondominated_sort(same).size(), 1u);

  const std::vector<Objectives> mixed = {{1, 2}, {1}};
  EXPECT_THROW(nondominated_sort(mixed), ArgumentError);
}

TEST(NondominatedSort, MatchesBruteForce) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(64);
    const std::size_t m = 1 + rng.index(4);
    std::vector<Objectives> pts(n, Objectives(m));
    for (auto& p : pts)
      for (double& v : p) v = static_cast<double>(rng.index(6));  // ties on purpose
    EXPECT_EQ(nondominated_sort(pts), oracle::brute_force_fronts(pts)) << "trial " << trial;
  }
}

TEST(CrowdingDistance, Examples) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<Objectives> two = {{0, 1}, {1, 0}};
  EXPECT_EQ(crowding_distance(two), (std::vector<double>{inf, inf}));
  const std::vector<Objectives> one = {{0.5, 0.5}};
  EXPECT_EQ(crowding_distance(one), (std::vector<double>{inf}));
  const std::vector<Objectives> three = {{0, 2}, {1, 1}, {2, 0}};
  const auto d = crowding_distance(three);
  EXPECT_EQ(d[0], inf);
  EXPECT_EQ(d[2], inf);
  EXPECT_NEAR(d[1], 2.0, 1e-15);
  const std::vector<Objectives> flat = {{0, 5}, {1, 5}, {2, 5}};
  EXPECT_NEAR(crowding_distance(flat)[1], 1.0, 1e-15);
}

// --- NSGA-II offspring ---------------------------------------------------------

TEST(Nsga2, ZeroCountAndUnevaluated) {
  Rng rng(5);
  const auto layout = mixed_layout();
  auto pop = evaluated_population(layout, 10, rng);
  EXPECT_TRUE(generate_offspring_nsga2(pop, layout, 0, rng).empty());
  pop.members[3].objectives.reset();
  EXPECT_THROW(generate_offspring_nsga2(pop, layout, 4, rng), StateError);
}

TEST(Nsga2, OffspringRespectRangesAndSnapping) {
  Rng rng(6);
  const auto layout = mixed_layout();
  const auto pop = evaluated_population(layout, 20, rng);
  const auto kids = generate_offspring_nsga2(pop, layout, 1000, rng,
                                             {0.9, 15.0, 0.5, 20.0});
  ASSERT_EQ(kids.size(), 1000u);
  for (const auto& k : kids) {
    EXPECT_TRUE(layout.admits(k.assignment));
    EXPECT_EQ(k.provenance, Provenance::NsgaOffspring);
    EXPECT_FALSE(k.evaluated());
  }
}

TEST(Nsga2, ZeroRatesCopyParents) {
  Rng rng(7);
  const auto layout = mixed_layout();
  const auto pop = evaluated_population(layout, 15, rng);
  const auto kids = generate_offspring_nsga2(pop, layout, 37, rng, {0.0, 15.0, 0.0, 20.0});
  ASSERT_EQ(kids.size(), 37u);
  for (const auto& k : kids) {
    const bool is_parent = std::any_of(pop.members.begin(), pop.members.end(),
                                       [&](const Candidate& p) { return p.assignment == k.assignment; });
    EXPECT_TRUE(is_parent);
  }
}

// --- ACO / Metropolis offspring ------------------------------------------------

TEST(AcoMh, SingleMemberDegenerateKernel) {
  Rng rng(8);
  const auto layout = mixed_layout();
  Population src;
  src.members.push_back({{0.25, 1.0, 0.4, 0.5, 10.0 + 10.0 / 3.0}, Objectives{0.1},
                         Provenance::RandomInit});
  const auto kids = generate_offspring_aco_mh(src, layout, 50, rng);
  for (const auto& k : kids) {
    EXPECT_EQ(k.assignment[0], 0.25);
    EXPECT_EQ(k.assignment[1], 1.0);
    EXPECT_EQ(k.assignment[2], 0.4);
    EXPECT_TRUE(layout.admits(k.assignment));
  }
}

TEST(AcoMh, EmptyOrUnevaluatedSourceIsStateError) {
  Rng rng(9);
  const auto layout = mixed_layout();
  EXPECT_THROW(generate_offspring_aco_mh(Population{}, layout, 3, rng), StateError);
  Population p;
  p.members.push_back({{0.1, 0, 0.2, 0.5, 10 + 10.0 / 3}, std::nullopt, Provenance::RandomInit});
  EXPECT_THROW(generate_offspring_aco_mh(p, layout, 3, rng), StateError);
}

TEST(AcoMh, SmoothedDiscreteProbabilities) {
  // Every elite picked point 2 of 5 (index 1).
  const std::vector<std::size_t> chosen(7, 1);
  const auto w = rank_weights(7, 0.1);
  const auto p = discrete_choice_probabilities(chosen, w, 5, 0.1);
  EXPECT_NEAR(p[1], 1.1 / 1.5, 1e-12);
  for (std::size_t j : {0u, 2u, 3u, 4u}) EXPECT_NEAR(p[j], 0.1 / 1.5, 1e-12);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
}

TEST(AcoMh, DiscreteDrawFrequenciesFollowSmoothing) {
  Rng rng(10);
  std::vector<Dimension> dims = {{{0.0, 1.0}, ResolutionMode::discrete(5),
                                  discrete_points({0.0, 1.0}, 5)}};
  const SearchLayout layout(dims);
  Population src;
  const double target = layout[0].points[1];
  for (int i = 0; i < 8; ++i)
    src.members.push_back({{target}, Objectives{static_cast<double>(i)}, Provenance::RandomInit});
  const auto kids = generate_offspring_aco_mh(src, layout, 20000, rng);
  const double hits = static_cast<double>(std::count_if(
      kids.begin(), kids.end(), [&](const Candidate& c) { return c.assignment[0] == target; }));
  EXPECT_NEAR(hits / 20000.0, 1.1 / 1.5, 0.015);
}

TEST(AcoMh, OffspringRespectRangesAndSnapping) {
  Rng rng(11);
  const auto layout = mixed_layout();
  const auto pop = evaluated_population(layout, 30, rng);
  const auto kids = generate_offspring_aco_mh(pop, layout, 1000, rng);
  ASSERT_EQ(kids.size(), 1000u);
  for (const auto& k : kids) {
    EXPECT_TRUE(layout.admits(k.assignment));
    EXPECT_EQ(k.provenance, Provenance::AcoMhOffspring);
  }
}

// --- query allocation ----------------------------------------------------------

TEST(AllocateQueries, Examples) {
  auto w = allocate_queries(std::vector<long>{});
  EXPECT_EQ(w.weights, (std::vector<double>{0.5, 0.5}));
  w = allocate_queries(std::vector<long>{9, 0});
  EXPECT_NEAR(w.weights[0], 0.9, 1e-12);
  EXPECT_NEAR(w.weights[1], 0.1, 1e-12);
  w = allocate_queries(std::vector<long>{0, 0});
  EXPECT_NEAR(w.weights[0], 0.5, 1e-12);
  w = allocate_queries(std::vector<long>{3, 1});
  EXPECT_NEAR(w.weights[0], 4.0 / 6.0, 1e-12);
}

TEST(AllocateQueries, FloorAndNormalization) {
  Rng rng(12);
  for (int i = 0; i < 500; ++i) {
    std::vector<long> s = {static_cast<long>(rng.index(200)), static_cast<long>(rng.index(200)),
                           static_cast<long>(rng.index(3))};
    const auto w = allocate_queries(s, 3);
    double sum = 0;
    for (double x : w.weights) {
      EXPECT_GE(x, 0.1 - 1e-12);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(SplitCount, SumsExactly) {
  const std::vector<double> w = {0.9, 0.1};
  EXPECT_EQ(split_count(50, w), (std::vector<std::size_t>{45, 5}));
  EXPECT_EQ(split_count(7, std::vector<double>{0.5, 0.5}), (std::vector<std::size_t>{4, 3}));
}

// --- evolve_run ----------------------------------------------------------------

TEST(EvolveRun, BudgetEqualsPopSize) {
  Rng rng(13);
  const auto layout = mixed_layout();
  OptimizerSettings s;
  s.pop_size = 20;
  auto pop = initialize_population(layout, 20, nullptr, 0.0, rng);
  auto out = evolve_run(sphere, pop, layout, 20, s, rng);
  EXPECT_EQ(out.log.size(), 20u);
  for (const auto& e : out.log) EXPECT_EQ(e.provenance, Provenance::RandomInit);
}

TEST(EvolveRun, ExactAccountingAndAdmissibility) {
  const auto layout = mixed_layout();
  for (long budget : {20L, 21L, 57L, 100L, 333L}) {
    Rng rng(static_cast<std::uint64_t>(budget));
    OptimizerSettings s;
    s.pop_size = 20;
    auto pop = initialize_population(layout, 20, nullptr, 0.0, rng);
    auto out = evolve_run(sphere, pop, layout, budget, s, rng);
    EXPECT_EQ(static_cast<long>(out.log.size()), budget);
    EXPECT_EQ(out.population.size(), 20u);
    for (const auto& e : out.log) EXPECT_TRUE(layout.admits(e.assignment));
  }
  Rng rng(1);
  OptimizerSettings s;
  s.pop_size = 20;
  auto pop = initialize_population(layout, 20, nullptr, 0.0, rng);
  EXPECT_THROW(evolve_run(sphere, pop, layout, 10, s, rng), StateError);
}

TEST(EvolveRun, SphereImprovesWithBudget) {
  auto space = unit_space(8, 1);
  const auto ranges = space.original_ranges();
  const std::vector<ResolutionMode> modes = {ResolutionMode::full()};
  const SearchLayout layout(space, ranges, modes);
  OptimizerSettings s;
  s.pop_size = 25;
  auto best_after = [&](long budget) {
    Rng rng(42);
    auto pop = initialize_population(layout, 25, nullptr, 0.0, rng);
    const auto out = evolve_run(sphere, pop, layout, budget, s, rng);
    double best = 1e300;
    for (const auto& e : out.log) best = std::min(best, e.objectives[0]);
    return best;
  };
  EXPECT_LT(best_after(500), best_after(50));
}

TEST(EvolveRun, ElitistWithinRun) {
  Rng rng(14);
  const auto layout = mixed_layout();
  OptimizerSettings s;
  s.pop_size = 16;
  auto pop = initialize_population(layout, 16, nullptr, 0.0, rng);
  double best = 1e300;
  long used = 0;
  // Step the run one generation at a time and check the best never leaves.
  auto out = evolve_run(sphere, pop, layout, 16, s, rng);
  for (const auto& e : out.log) best = std::min(best, e.objectives[0]);
  used = 16;
  Population cur = out.population;
  for (int gen = 0; gen < 20; ++gen) {
    out = evolve_run(sphere, cur, layout, 16, s, rng);
    for (const auto& e : out.log) best = std::min(best, e.objectives[0]);
    double pop_best = 1e300;
    for (const auto& m : out.population.members) pop_best = std::min(pop_best, m.primary());
    EXPECT_EQ(pop_best, best);
    cur = out.population;
    used += 16;
  }
  EXPECT_EQ(used, 16 * 21);
}

TEST(EvolveRun, ParallelEvaluationIsDeterministic) {
  const auto layout = mixed_layout();
  auto run = [&](unsigned jobs) {
    Rng rng(15);
    OptimizerSettings s;
    s.pop_size = 12;
    s.jobs = jobs;
    auto pop = initialize_population(layout, 12, nullptr, 0.0, rng);
    return evolve_run(sphere, pop, layout, 100, s, rng).log;
  };
  const auto a = run(1);
  const auto b = run(4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].assignment, b[i].assignment);
    EXPECT_EQ(a[i].objectives, b[i].objectives);
  }
}

// --- archive -------------------------------------------------------------------

TEST(Archive, SortedDedupedBounded) {
  Archive ar(5);
  Rng rng(16);
  for (int i = 0; i < 200; ++i) {
    const double v = static_cast<double>(rng.index(30));
    ar.offer({{v, 1.0}, Objectives{v}, Provenance::RandomInit});
  }
  ASSERT_EQ(ar.size(), 5u);
  for (std::size_t i = 0; i < ar.size(); ++i) {
    if (i) {
      EXPECT_LE(ar.members()[i - 1].primary(), ar.members()[i].primary());
    }
    for (std::size_t j = 0; j < i; ++j)
      EXPECT_NE(ar.members()[i].assignment, ar.members()[j].assignment);
  }
  EXPECT_EQ(ar.members().front().primary(), 0.0);
  EXPECT_THROW(ar.offer({{1.0}, std::nullopt, Provenance::RandomInit}), StateError);
}

// --- run_calibration -------------------------------------------------------------

TEST(RunCalibration, DefaultPlanAccountingAndMonotoneEvolution) {
  const auto space = unit_space(12, 6);
  OptimizerSettings s;
  s.pop_size = 20;
  const auto res = run_calibration(sphere, space, default_plan(), s, 123);
  EXPECT_EQ(res.evaluations, 4000);
  ASSERT_EQ(res.evolution.size(), 4000u);
  for (std::size_t i = 1; i < res.evolution.size(); ++i)
    EXPECT_LE(res.evolution[i], res.evolution[i - 1]);
  EXPECT_EQ(res.archive.size(), 20u);
  EXPECT_EQ(res.archive.members().front().primary(), res.evolution.back());

  // Group 1 (parameters 0 and 6) is shrunk at the start of run 2, within bounds.
  ASSERT_EQ(res.run_ranges.size(), 7u);
  for (std::size_t i : {0u, 6u}) {
    const auto r = res.run_ranges[1][i];
    EXPECT_GE(r.lo, 0.0);
    EXPECT_LE(r.hi, 1.0);
    EXPECT_LT(r.width(), 1.0);
  }
  // Focus groups beyond run 2 are still at full range in run 2.
  EXPECT_EQ(res.run_ranges[1][2], (SearchRange{0.0, 1.0}));
}

TEST(RunCalibration, EveryEvaluationIsAdmissible) {
  const auto space = unit_space(12, 6);
  const auto plan = default_plan();
  OptimizerSettings s;
  s.pop_size = 20;
  std::vector<std::vector<double>> seen;
  ObjectiveFunction f = [&](std::span<const double> x) {
    seen.emplace_back(x.begin(), x.end());
    return sphere(x);
  };
  const auto res = run_calibration(f, space, plan, s, 321);
  ASSERT_EQ(seen.size(), 4000u);
  std::size_t k = 0;
  for (int r = 1; r <= 7; ++r) {
    const SearchLayout layout(space, res.run_ranges[static_cast<std::size_t>(r - 1)],
                              modes_for_run(plan, r));
    for (long e = 0; e < plan.runs[static_cast<std::size_t>(r - 1)].budget; ++e, ++k)
      ASSERT_TRUE(layout.admits(seen[k])) << "run " << r << " eval " << e;
  }
}

TEST(RunCalibration, ResumeFromCheckpointReproducesTrial) {
  const auto space = unit_space(12, 6);
  OptimizerSettings s;
  s.pop_size = 20;
  std::vector<CalibrationCheckpoint> cps;
  const auto full = run_calibration(sphere, space, default_plan(), s, 77, nullptr,
                                    [&](const CalibrationCheckpoint& cp) { cps.push_back(cp); });
  ASSERT_EQ(cps.size(), 7u);
  const auto resumed = run_calibration(sphere, space, default_plan(), s, 77, &cps[2]);
  EXPECT_EQ(resumed.evolution, full.evolution);
  ASSERT_EQ(resumed.archive.size(), full.archive.size());
  for (std::size_t i = 0; i < full.archive.size(); ++i)
    EXPECT_EQ(resumed.archive.members()[i].assignment, full.archive.members()[i].assignment);
}

TEST(RunCalibration, EvaluatorFailureAbortsWithCheckpoint) {
  const auto space = unit_space(12, 6);
  OptimizerSettings s;
  s.pop_size = 20;
  int calls = 0;
  ObjectiveFunction f = [&](std::span<const double> x) -> Objectives {
    if (++calls == 700) throw std::runtime_error("model crashed");
    return sphere(x);
  };
  try {
    run_calibration(f, space, default_plan(), s, 5);
    FAIL();
  } catch (const TrialAborted& e) {
    EXPECT_EQ(e.checkpoint().completed_runs, 2);  // 200 + 300 done, failure inside run 3
    EXPECT_EQ(e.checkpoint().evaluations, 500);
    EXPECT_EQ(e.assignment().size(), 12u);
    // Resuming with a healthy evaluator completes the trial.
    const auto res = run_calibration(sphere, space, default_plan(), s, 5, &e.checkpoint());
    EXPECT_EQ(res.evaluations, 4000);
  }
}

TEST(RunCalibration, TraditionalPlanIsSingleRun) {
  const auto space = unit_space(12, 1);
  OptimizerSettings s;
  s.pop_size = 20;
  const auto res = run_calibration(sphere, space, traditional_plan(600), s, 9);
  EXPECT_EQ(res.evaluations, 600);
  EXPECT_EQ(res.run_ranges.size(), 1u);
}
