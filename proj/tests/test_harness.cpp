#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "mhcal/experiment.hpp"
#include "mhcal/report.hpp"

using namespace mhcal;

namespace {

fs::path source_dir() {
  const char* env = std::getenv("MHCAL_SOURCE_DIR");
  return env ? fs::path(env) : fs::current_path();
}

/// Fresh scratch directory per test.
fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mhcal_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

/// Tiny experiment: 3 cells, 200-evaluation plan, two schemes.
Json tiny_config(int trials = 2) {
  return {{"name", "tiny"},
          {"model", {{"type", "synthetic"}, {"cells", 3}, {"seed", 5}, {"days", 730}, {"spinup_days", 365}}},
          {"plan", {{"base", "default"}, {"scale", 0.05}}},
          {"configurations", {"Ranked", "Traditional"}},
          {"trials", trials},
          {"pop_size", 8},
          {"base_seed", 99}};
}

ExperimentConfig load_json(const Json& j, const fs::path& dir) {
  return load_config(write_file(dir / "config.json", j.dump(2)));
}

std::string config_error(const Json& j, const fs::path& dir) {
  try {
    load_json(j, dir);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, Watershed20Loads) {
  const auto c = load_config(source_dir() / "configs" / "watershed-20.json");
  EXPECT_EQ(c.trials, 10);
  EXPECT_EQ(c.plan.total_budget(), 4000);
  EXPECT_EQ(c.plan.g, 6);
  EXPECT_EQ(c.model.cells, 20);
  ASSERT_EQ(c.configurations.size(), 4u);
  EXPECT_EQ(c.configurations[0].name, "RankedDU");
  EXPECT_TRUE(c.configurations[3].traditional());
  for (const auto& s : c.configurations) EXPECT_EQ(s.groups.size(), 121u) << s.name;
}

TEST(Config, ResolvedDumpRoundTrips) {
  const auto dir = scratch("roundtrip");
  const auto c = load_config(source_dir() / "configs" / "watershed-20.json");
  write_file(dir / "resolved.json", config_to_json(c).dump(2));
  const auto again = load_config(dir / "resolved.json");
  EXPECT_EQ(again, c);
  EXPECT_EQ(config_to_json(again).dump(2), config_to_json(c).dump(2));
}

TEST(Config, GroupOutsidePlanNamesParameter) {
  const auto dir = scratch("group7");
  auto j = tiny_config();
  Json groups = Json::object();
  const auto space = toy::initial_model_space(3);
  for (const auto& p : space.params()) groups[p.name] = 1;
  groups["w_02"] = 7;
  j["configurations"] = Json::array({{{"name", "Hand"}, {"groups", groups}}});
  j["plan"] = "default";
  j["pop_size"] = 50;
  const auto msg = config_error(j, dir);
  EXPECT_NE(msg.find("w_02"), std::string::npos) << msg;
  EXPECT_NE(msg.find("7"), std::string::npos) << msg;
}

TEST(Config, ManualGroupsMustCoverEveryParameter) {
  const auto dir = scratch("cover");
  auto j = tiny_config();
  j["configurations"] = Json::array({{{"name", "Hand"}, {"groups", {{"C_01", 1}}}}});
  EXPECT_NE(config_error(j, dir).find("has no group"), std::string::npos);
}

TEST(Config, ParseErrorReportsLine) {
  const auto dir = scratch("parse");
  const auto p = write_file(dir / "bad.json", "{\n  \"name\": \"x\",\n  \"trials\": ,\n}\n");
  try {
    load_config(p);
    FAIL() << "expected a parse error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(Config, SemanticErrorsNameTheKey) {
  const auto dir = scratch("semantic");
  auto j = tiny_config();
  j["model"]["colour"] = "blue";
  EXPECT_NE(config_error(j, dir).find("colour"), std::string::npos);
  j = tiny_config();
  j["trials"] = 0;
  EXPECT_NE(config_error(j, dir).find("trials"), std::string::npos);
  j = tiny_config();
  j["configurations"] = {"Nope"};
  EXPECT_NE(config_error(j, dir).find("Nope"), std::string::npos);
  j = tiny_config();
  j["configurations"] = {"Ranked", "Ranked"};
  EXPECT_NE(config_error(j, dir).find("duplicate"), std::string::npos);
  j = tiny_config();
  j["plan"] = {{"g", 2}, {"w", 2}, {"runs", {{{"budget", 100}, {"modes", {"full", "sideways"}}}}}};
  EXPECT_NE(config_error(j, dir).find("plan.runs[0].modes[1]"), std::string::npos);
}

TEST(Config, ExternalFilesMustExist) {
  const auto dir = scratch("external_missing");
  auto j = tiny_config();
  j["model"] = {{"type", "external"}, {"cells", 3}, {"observed", "nowhere.csv"}, {"forcing", "f.csv"}};
  EXPECT_NE(config_error(j, dir).find("does not exist"), std::string::npos);
}

TEST(Config, RegionGroupingNeedsSixGroups) {
  const auto dir = scratch("region_g");
  auto j = tiny_config();
  j["configurations"] = {"RankedDU"};
  j["plan"] = {{"g", 2}, {"w", 2}, {"runs", {{{"budget", 100}, {"modes", {"full", 2}}}, {{"budget", 100}, {"modes", {"shrunk", "full"}}}}}};
  EXPECT_NE(config_error(j, dir).find("g = 6"), std::string::npos);
}

TEST(TruthBundle, ExternalModelMatchesSynthetic) {
  const auto dir = scratch("bundle");
  write_truth_bundle(4, 21, 800, dir);
  ModelConfig ext;
  ext.type = ModelConfig::Type::External;
  ext.cells = 4;
  ext.observed = (dir / "observed.csv").string();
  ext.forcing = (dir / "forcing.csv").string();
  ext.truth = (dir / "truth.json").string();
  ModelConfig syn;
  syn.cells = 4;
  syn.seed = 21;
  syn.days = 800;
  const auto a = build_watershed(ext);
  const auto b = build_watershed(syn);
  EXPECT_EQ(a.observed, b.observed);
  EXPECT_EQ(a.forcing, b.forcing);
  ASSERT_EQ(a.truth.size(), b.truth.size());
  for (std::size_t i = 0; i < a.truth.size(); ++i) {
    EXPECT_EQ(std::isnan(a.truth[i]), std::isnan(b.truth[i]));
    if (!std::isnan(a.truth[i])) {
      EXPECT_EQ(a.truth[i], b.truth[i]);
    }
  }
}

TEST(Grouping, RegionBlocksFollowCellOrder) {
  ModelConfig m;
  m.cells = 20;
  m.days = 730;
  const auto w = build_watershed(m);
  const auto space = base_space(w);
  Screening sc;
  sc.factors = {"C", "f", "w", "k", "m", "a", "n_ch"};
  sc.effects = {-0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.35};
  for (const char* kind : {"ranked-du", "ranked-ud", "ranked-rand"}) {
    const auto r = grouping_for(kind, space, w, sc, 6, 0.01, 3).assignment.group;
    ASSERT_EQ(r.size(), 121u);
    const auto order = cell_order(kind, 20, 3);
    // Top three kinds by region block: 7 / 7 / 6 cells (reversed for UD).
    const std::vector<int> first_block = std::string(kind) == "ranked-ud" ? std::vector<int>{6, 7, 7}
                                                                          : std::vector<int>{7, 7, 6};
    for (toy::Kind k : {toy::Kind::Capacity, toy::Kind::Field, toy::Kind::Wilting}) {
      std::size_t pos = 0;
      for (int block = 0; block < 3; ++block)
        for (int n = 0; n < first_block[static_cast<std::size_t>(block)]; ++n, ++pos)
          EXPECT_EQ(r.at(toy::param_name(k, order[pos])), block + 1) << kind;
    }
    for (std::size_t pos = 0; pos < 20; ++pos) {
      const int half = pos < 10 ? 4 : 5;
      EXPECT_EQ(r.at(toy::param_name(toy::Kind::Conductivity, order[pos])), half);
      EXPECT_EQ(r.at(toy::param_name(toy::Kind::Exponent, order[pos])), half);
      EXPECT_EQ(r.at(toy::param_name(toy::Kind::Recession, order[pos])), 6);
    }
    EXPECT_EQ(r.at("n_ch"), 4);  // below three kinds, above the fourth
  }
  EXPECT_EQ(cell_order("ranked-du", 20, 3).front(), 0);
  EXPECT_EQ(cell_order("ranked-ud", 20, 3).front(), 19);
  EXPECT_NE(cell_order("ranked-rand", 20, 3), cell_order("ranked-rand", 20, 4));
}

TEST(Grouping, RankedKeepsInsensitiveInLastGroup) {
  ModelConfig m;
  m.cells = 3;
  m.days = 730;
  const auto w = build_watershed(m);
  const auto space = base_space(w);
  Screening sc;
  sc.factors = {"C", "f", "w", "k", "m", "a", "n_ch"};
  sc.effects = {0.5, 0.4, 0.3, 0.2, 0.1, 0.0, 0.05};
  const auto r = grouping_for("ranked", space, w, sc, 6, 0.01, 1);
  EXPECT_EQ(r.fixed.size(), 3u);
  ASSERT_EQ(r.assignment.group.size(), 19u);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(r.assignment.group.at(toy::param_name(toy::Kind::Recession, c)), 6);
}

TEST(Experiment, SeedsAndBudgets) {
  EXPECT_EQ(trial_seed(99, "Ranked", 2), 99ULL ^ hash_name_index("Ranked", 2));
  EXPECT_NE(trial_seed(99, "Ranked", 1), trial_seed(99, "Ranked", 2));
  const auto dir = scratch("budgets");
  const auto c = load_json(tiny_config(), dir);
  ModelConfig m = c.model;
  const auto base = base_space(build_watershed(m));
  const auto ranked = prepare_configuration(c, 0, base);
  const auto trad = prepare_configuration(c, 1, base);
  EXPECT_EQ(trad.plan.g, 1);
  EXPECT_EQ(trad.plan.total_budget(), ranked.plan.total_budget());
}

TEST(Experiment, DeterministicAcrossJobCounts) {
  const auto dir = scratch("determinism");
  const auto c = load_json(tiny_config(), dir);
  RunOptions serial;
  RunOptions parallel;
  parallel.jobs = 3;
  const auto a = run_experiment(c, dir / "a", serial);
  const auto b = run_experiment(c, dir / "b", parallel);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].ok) << a[i].error;
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].final_nse, b[i].final_nse);
  }
  for (const auto* cfg : {"Ranked", "Traditional"})
    for (int t = 1; t <= 2; ++t) {
      const auto name = "evolution_" + trial_stem(t) + ".csv";
      EXPECT_EQ(read_text(dir / "a" / cfg / name), read_text(dir / "b" / cfg / name));
    }
  EXPECT_EQ(read_text(dir / "a" / "trials.csv"), read_text(dir / "b" / "trials.csv"));
  emit_report(dir / "a", dir / "ra");
  emit_report(dir / "b", dir / "rb");
  for (const auto* f : {"table6.csv", "table7.csv", "table8.csv", "evolution.csv", "boxplots.csv"})
    EXPECT_EQ(read_text(dir / "ra" / f), read_text(dir / "rb" / f)) << f;
}

TEST(Experiment, TrialReportInvariants) {
  const auto dir = scratch("invariants");
  const auto c = load_json(tiny_config(1), dir);
  run_experiment(c, dir / "out");
  const auto t = read_trial(dir / "out" / "Ranked", 1);
  EXPECT_EQ(static_cast<long>(t.evolution.size()), c.plan.total_budget());
  EXPECT_EQ(t.evaluations, c.plan.total_budget());
  for (std::size_t i = 1; i < t.evolution.size(); ++i) EXPECT_GE(t.evolution[i], t.evolution[i - 1]);
  EXPECT_EQ(t.archive.size(), 20u);
  EXPECT_EQ(t.boxes.size(), 19u);
  int nc = 0;
  for (const auto& b : t.boxes) nc += b.nc;
  EXPECT_EQ(nc, t.nc);
  EXPECT_FALSE(fs::exists(dir / "out" / "Ranked" / "checkpoint_trial_01.json"));
}

TEST(Experiment, FailureIsIsolatedAndResumable) {
  const auto dir = scratch("failure");
  const auto c = load_json(tiny_config(), dir);
  auto calls = std::make_shared<std::atomic<long>>(0);
  RunOptions broken;
  broken.wrap_objective = [calls](const std::string& name, int trial, ObjectiveFunction f) -> ObjectiveFunction {
    if (name != "Ranked" || trial != 2) return f;
    return [calls, f](std::span<const double> x) {
      if (calls->fetch_add(1) >= 60) throw std::runtime_error("injected evaluator fault");
      return f(x);
    };
  };
  const auto out = run_experiment(c, dir / "out", broken);
  ASSERT_EQ(out.size(), 4u);
  int ok = 0;
  for (const auto& o : out) ok += o.ok;
  EXPECT_EQ(ok, 3);
  EXPECT_FALSE(out[1].ok);
  EXPECT_NE(out[1].error.find("injected"), std::string::npos);
  const auto fail_path = dir / "out" / "Ranked" / "failure_trial_02.json";
  ASSERT_TRUE(fs::exists(fail_path));
  const auto rec = Json::parse(read_text(fail_path));
  EXPECT_GE(rec.at("completed_runs").get<int>(), 1);
  EXPECT_TRUE(fs::exists(dir / "out" / "Ranked" / "checkpoint_trial_02.json"));
  EXPECT_NE(read_text(dir / "out" / "trials.csv").find("failed"), std::string::npos);

  // Resuming from the checkpoint reproduces the uninterrupted trial exactly.
  const auto resumed = run_experiment(c, dir / "out");
  for (const auto& o : resumed) EXPECT_TRUE(o.ok) << o.error;
  EXPECT_TRUE(resumed[0].reused);
  EXPECT_FALSE(resumed[1].reused);
  EXPECT_FALSE(fs::exists(fail_path));
  RunOptions fresh;
  fresh.resume = false;
  run_experiment(c, dir / "clean", fresh);
  EXPECT_EQ(read_text(dir / "out" / "Ranked" / "evolution_trial_02.csv"),
            read_text(dir / "clean" / "Ranked" / "evolution_trial_02.csv"));
}

TEST(Experiment, RefusesForeignOutputDirectory) {
  const auto dir = scratch("foreign");
  const auto c = load_json(tiny_config(1), dir);
  run_experiment(c, dir / "out");
  auto other = c;
  other.base_seed = 100;
  EXPECT_THROW(run_experiment(other, dir / "out"), ConfigError);
}

TEST(Report, CheckpointsFollowCumulativeBudgets) {
  EXPECT_EQ(report_checkpoints(default_plan()), (std::vector<long>{950, 1500, 4000}));
  EXPECT_EQ(report_checkpoints(traditional_plan(4000)), (std::vector<long>{4000}));
  const auto half = scaled_plan(default_plan(), 0.5);
  const auto cum = half.cumulative_budgets();
  EXPECT_EQ(report_checkpoints(half), (std::vector<long>{cum[2], cum[3], cum.back()}));
}

TEST(Report, TablesHaveDocumentedShape) {
  const auto dir = scratch("report");
  const auto c = load_json(tiny_config(), dir);
  run_experiment(c, dir / "out");
  const auto rep = emit_report(dir / "out", dir / "rep");

  std::istringstream t6(read_text(dir / "rep" / "table6.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(t6, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "metric,Ranked,Traditional");
  EXPECT_EQ(lines[1].rfind("NC,", 0), 0u);
  EXPECT_EQ(lines[2].rfind("HB,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("RosARE,", 0), 0u);

  const auto evo = read_csv_columns(dir / "rep" / "evolution.csv", 5);
  EXPECT_EQ(static_cast<long>(evo[0].size()), c.plan.total_budget());
  EXPECT_EQ(evo[0].back(), static_cast<double>(c.plan.total_budget()));

  const auto cum = c.plan.cumulative_budgets();
  EXPECT_EQ(rep.checkpoints, (std::vector<long>{cum[2], cum[3], cum.back()}));
  const auto& ranked = rep.results("Ranked");
  for (std::size_t ti = 0; ti < ranked.trials.size(); ++ti)
    for (std::size_t k = 0; k < rep.checkpoints.size(); ++k)
      EXPECT_EQ(rep.table8[0][ti][k], ranked.trials[ti].evolution[static_cast<std::size_t>(rep.checkpoints[k] - 1)]);

  // NC by group sums to the mean NC of the configuration.
  double sum = 0;
  for (double v : rep.breakdown("Ranked").nc) sum += v;
  EXPECT_NEAR(sum, rep.mean_nc[0], 1e-12);
  EXPECT_EQ(rep.breakdown("Traditional@Ranked").nc.size(), 6u);
  EXPECT_EQ(rep.rosare.size(), 2u);

  const auto sig = Json::parse(read_text(dir / "rep" / "significance.json"));
  EXPECT_TRUE(sig.contains("anova_nc"));
  EXPECT_TRUE(sig.contains("welch_hb"));
  EXPECT_TRUE(sig.contains("rosare_vs_half"));
  EXPECT_THROW(rep.results("Missing"), ArgumentError);
}

TEST(Report, MissingConfigurationIsNamed) {
  const auto dir = scratch("report_missing");
  const auto c = load_json(tiny_config(1), dir);
  run_experiment(c, dir / "out");
  fs::remove_all(dir / "out" / "Traditional");
  try {
    build_report(dir / "out");
    FAIL() << "expected an error";
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("Traditional"), std::string::npos);
  }
}
