#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fedrco/config.hpp"
#include "fedrco/diagnostics.hpp"
#include "fedrco/federation.hpp"
#include "json.hpp"

namespace fedrco::harness {

// Datasets, partition and initial network resolved from a config.
struct Experiment {
  data::Dataset train;
  data::Dataset test;
  data::Partition partition;
  model::Network init;
};

// Throws ConfigInvalid, IoFailure, FormatError and partitioning errors.
Experiment build(const config::ExperimentConfig& cfg);

struct RunResult {
  std::vector<federation::RoundRecord> records;
  model::Params final_params;
};

/// Runs cfg.rounds rounds. With a non-empty out_dir, writes metrics.csv,
/// anomalies.csv, timing.csv and config.json there; every CSV row is
/// appended with one write call as soon as its round completes.
/// `on_round`, when set, is called after each round.
RunResult run_experiment(const config::ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir = {},
                         const std::function<void(const federation::RoundRecord&)>& on_round = {});

std::string metrics_header();
std::string metrics_row(const federation::RoundRecord& rec);

// Append-only file whose appends are single write(2) calls.
class AppendFile {
 public:
  // Truncates. Throws IoFailure.
  explicit AppendFile(const std::filesystem::path& path);
  ~AppendFile();
  AppendFile(const AppendFile&) = delete;
  AppendFile& operator=(const AppendFile&) = delete;

  void append(const std::string& text);

 private:
  int fd_ = -1;
  std::filesystem::path path_;
};

/// A named audit result. Negative controls pass when the underlying audit
/// fails.
struct SuiteEntry {
  diagnostics::AuditReport report;
  bool negative_control = false;

  bool ok() const { return negative_control ? !report.passed : report.passed; }
};

// suite: rank, condition, descent, drift or all. Throws InvalidArgument.
std::vector<SuiteEntry> run_audit_suite(const std::string& suite, std::uint64_t seed);

nlohmann::json to_json(const SuiteEntry& entry);

// Appends entries to a JSON array file, creating it when absent.
void append_reports(const std::filesystem::path& path, const std::vector<SuiteEntry>& entries);

}  // namespace fedrco::harness
