// Command-line front end: run, audit and sweep.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedrco/config.hpp"
#include "fedrco/error.hpp"
#include "fedrco/harness.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitAudit = 2;

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fedrco::Error(fedrco::ErrorCode::IoFailure, "cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw fedrco::Error(fedrco::ErrorCode::ConfigInvalid, path + ": " + e.what());
  }
}

int run_command(const std::string& config_path, const std::string& seed, const std::string& out) {
  nlohmann::json doc = read_json(config_path);
  if (!seed.empty()) fedrco::config::set_value(doc, "seed", seed);
  const auto cfg = fedrco::config::from_json(doc);
  const auto result = fedrco::harness::run_experiment(
      cfg, out, [](const fedrco::federation::RoundRecord& r) {
        std::printf("round %zu  test_acc %.4f  loss %.4f  resets %zu\n", r.round, r.test_accuracy,
                    r.train_loss, r.hard_resets);
        std::fflush(stdout);
      });
  if (!result.records.empty()) {
    std::printf("final test accuracy %.4f\n", result.records.back().test_accuracy);
  }
  return 0;
}

int audit_command(const std::string& suite, const std::string& report, std::uint64_t seed) {
  const auto entries = fedrco::harness::run_audit_suite(suite, seed);
  bool ok = true;
  for (const auto& e : entries) {
    std::printf("%-36s %s  trials=%zu violations=%zu worst_margin=%.3g%s\n", e.report.name.c_str(),
                e.ok() ? "ok  " : "FAIL", e.report.trials, e.report.violations,
                e.report.worst_margin, e.negative_control ? "  (negative control)" : "");
    ok = ok && e.ok();
  }
  if (!report.empty()) fedrco::harness::append_reports(report, entries);
  return ok ? 0 : kExitAudit;
}

int sweep_command(const std::string& config_path, const std::string& param,
                  const std::vector<std::string>& values, const std::string& out) {
  const nlohmann::json base = read_json(config_path);
  fedrco::config::from_json(base);
  std::printf("%s,final_test_accuracy,inversions\n", param.c_str());
  for (const auto& v : values) {
    nlohmann::json doc = base;
    fedrco::config::set_value(doc, param, v);
    const auto cfg = fedrco::config::from_json(doc);
    const std::filesystem::path dir =
        out.empty() ? std::filesystem::path{} : std::filesystem::path(out) / (param + "=" + v);
    const auto result = fedrco::harness::run_experiment(cfg, dir);
    std::size_t inversions = 0;
    for (const auto& r : result.records) inversions += r.inversions;
    const double acc = result.records.empty() ? 0.0 : result.records.back().test_accuracy;
    std::printf("%s,%.6f,%zu\n", v.c_str(), acc, inversions);
    std::fflush(stdout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated K-FAC simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seed;
  std::string out;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out, "Directory for metrics files");

  std::string suite = "all";
  std::string report;
  std::uint64_t audit_seed = 0;
  auto* audit = app.add_subcommand("audit", "Run theory audits");
  audit->add_option("--suite", suite, "rank, condition, descent, drift or all")
      ->check(CLI::IsMember({"rank", "condition", "descent", "drift", "all"}));
  audit->add_option("--report", report, "JSON array file to append results to");
  audit->add_option("--seed", audit_seed, "Audit seed");

  std::string sweep_config;
  std::string param;
  std::vector<std::string> values;
  std::string sweep_out;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per parameter value");
  sweep->add_option("--config", sweep_config, "JSON config")->required()->check(CLI::ExistingFile);
  sweep->add_option("--param", param, "Dotted config key, e.g. kfac.t_inv or t_inv")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  sweep->add_option("--out", sweep_out, "Directory for per-value metrics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return run_command(config_path, seed, out);
    if (*audit) return audit_command(suite, report, audit_seed);
    if (*sweep) return sweep_command(sweep_config, param, values, sweep_out);
  } catch (const fedrco::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    const auto code = e.code();
    return code == fedrco::ErrorCode::ConfigInvalid || code == fedrco::ErrorCode::IoFailure
               ? kExitConfig
               : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
