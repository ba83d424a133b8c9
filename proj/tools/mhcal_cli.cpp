// Command-line front end: truth generation, screening, calibration, reporting.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <thread>

#include "CLI11.hpp"

#include "mhcal/experiment.hpp"
#include "mhcal/report.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

int make_truth(int cells, std::uint64_t seed, std::size_t days, const std::string& out) {
  mhcal::write_truth_bundle(cells, seed, days, out);
  std::cout << "wrote truth.json, observed.csv, forcing.csv to " << out << "\n";
  return 0;
}

int sensitivity(const std::string& config, const std::string& out) {
  std::optional<mhcal::Screening> sc;
  auto cfg = mhcal::load_config(config, &sc);
  if (!sc) {
    const auto w = mhcal::build_watershed(cfg.model);
    sc = mhcal::screen_homogenized(w, cfg.sensitivity, cfg.metrics);
  }
  std::cout << "screening: " << sc->factors.size() << " factors, " << sc->design.runs() << " runs\n";
  for (const auto& g : sc->design.generators) std::cout << "  generator " << g << "\n";
  for (std::size_t f = 0; f < sc->factors.size(); ++f)
    std::cout << "  " << sc->factors[f] << " effect " << mhcal::format_double(sc->effects[f]) << "\n";
  for (const auto& c : cfg.configurations) {
    std::map<int, int> sizes;
    for (const auto& [_, g] : c.groups) ++sizes[g];
    std::cout << "  " << c.name << " (" << c.grouping << "): group sizes";
    for (const auto& [g, n] : sizes) std::cout << " " << g << ":" << n;
    std::cout << "\n";
  }
  if (!out.empty()) {
    mhcal::write_screening(cfg, *sc, out);
    std::cout << "wrote design.csv, effects.csv, design.json, groups.json to " << out << "\n";
  }
  return 0;
}

int calibrate(const std::string& config, const std::string& out, unsigned jobs, int trials, bool fresh) {
  const auto cfg = mhcal::load_config(config);
  mhcal::RunOptions opt;
  opt.jobs = jobs;
  opt.trials = trials;
  opt.resume = !fresh;
  opt.progress = [](const std::string& line) { std::cerr << line << std::endl; };
  const auto outcomes = mhcal::run_experiment(cfg, out, opt);
  std::size_t failed = 0;
  for (const auto& o : outcomes) failed += !o.ok;
  std::cout << outcomes.size() - failed << " trials succeeded, " << failed << " failed\n";
  return failed ? kRuntime : 0;
}

int report(const std::string& in, const std::string& out) {
  const auto rep = mhcal::emit_report(in, out);
  std::cout << "metric";
  for (const auto& c : rep.configurations) std::cout << "\t" << c.name;
  std::cout << "\nNC";
  for (double v : rep.mean_nc) std::cout << "\t" << mhcal::format_double(v);
  std::cout << "\nHB";
  for (double v : rep.mean_hb) std::cout << "\t" << mhcal::format_double(v);
  std::cout << "\nRosARE";
  for (double v : rep.mean_rosare) std::cout << "\t" << mhcal::format_double(v);
  std::cout << "\nwrote report to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-run grouped calibration toolkit"};
  app.require_subcommand(1);

  int cells = 20;
  std::uint64_t seed = 1;
  std::size_t days = 1095;
  std::string out, config, in;
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
  int trials = 0;
  bool fresh = false;

  auto* mt = app.add_subcommand("make-truth", "Generate a synthetic watershed and its observations");
  mt->add_option("--cells", cells, "Number of cells")->required()->check(CLI::Range(3, 100000));
  mt->add_option("--seed", seed, "Seed")->required();
  mt->add_option("--days", days, "Days of forcing")->check(CLI::Range(730, 1000000));
  mt->add_option("--out", out, "Output directory")->required();

  auto* se = app.add_subcommand("sensitivity", "Run the factorial screening and show the groupings");
  se->add_option("--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  se->add_option("--out", out, "Directory for design, effects and group maps");

  auto* ca = app.add_subcommand("calibrate", "Run every configuration and trial");
  ca->add_option("--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  ca->add_option("--out", out, "Output directory")->required();
  ca->add_option("--jobs", jobs, "Concurrent trials")->check(CLI::PositiveNumber);
  ca->add_option("--trials", trials, "Override the configured trial count")->check(CLI::PositiveNumber);
  ca->add_flag("--fresh", fresh, "Ignore finished trials and checkpoints in the output directory");

  auto* re = app.add_subcommand("report", "Summarize a calibrate output directory");
  re->add_option("--in", in, "Calibrate output directory")->required()->check(CLI::ExistingDirectory);
  re->add_option("--out", out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (mt->parsed()) return make_truth(cells, seed, days, out);
    if (se->parsed()) return sensitivity(config, out);
    if (ca->parsed()) return calibrate(config, out, jobs, trials, fresh);
    if (re->parsed()) return report(in, out);
  } catch (const mhcal::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
