#include "fedrco/harness.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "fedrco/error.hpp"

namespace fedrco::harness {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t integer_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

}  // namespace

Experiment build(const config::ExperimentConfig& cfg) {
  Experiment e{{}, {}, {}, model::make_dense_network(1, {}, 2)};
  const auto seed = cfg.seed();
  if (cfg.dataset.kind == config::DatasetKind::File) {
    e.train = data::read_dataset(cfg.dataset.train_path);
    e.test = data::read_dataset(cfg.dataset.test_path);
    if (!(e.train.shape == e.test.shape) || e.train.num_classes != e.test.num_classes) {
      throw Error(ErrorCode::ConfigInvalid, "dataset: train and test files disagree on shape");
    }
  } else {
    auto split = data::make_synthetic_split(cfg.dataset.synthetic, cfg.dataset.test_samples, seed);
    e.train = std::move(split.train);
    e.test = std::move(split.test);
  }

  if (cfg.model.kind == config::ModelKind::Cnn) {
    Shape3 shape = e.train.shape;
    if (shape.height == 1 && shape.width == 1) {
      const std::size_t side = integer_sqrt(shape.channels);
      if (side == 0) {
        throw Error(ErrorCode::ConfigInvalid, "model.kind: cnn needs image data or a square dataset.dim");
      }
      shape = Shape3{1, side, side};
      e.train.shape = shape;
      e.test.shape = shape;
    }
    e.init = model::make_cnn(shape, cfg.model.conv_channels, cfg.model.kernel, cfg.model.hidden,
                             e.train.num_classes);
  } else {
    e.init = model::make_dense_network(e.train.shape.size(), cfg.model.hidden, e.train.num_classes);
  }
  Rng init_rng = make_stream(seed, 0, 0, StreamTag::Init);
  e.init.initialize(init_rng);

  Rng prng = make_stream(seed, 0, 0, StreamTag::Partition);
  const std::size_t clients = cfg.federation.clients;
  switch (cfg.partition.kind) {
    case config::PartitionKind::Dirichlet:
      e.partition = data::dirichlet_partition(e.train, clients, cfg.partition.alpha, prng);
      break;
    case config::PartitionKind::Pathological:
      e.partition =
          data::pathological_partition(e.train, clients, cfg.partition.labels_per_client, prng);
      break;
    case config::PartitionKind::Iid:
      e.partition = data::iid_partition(e.train, clients, prng);
      break;
  }
  return e;
}

std::string metrics_header() {
  return "round,test_accuracy,train_loss,train_accuracy,accumulated_divergence,"
         "sudden_explosion,hard_resets,inversions,uplink_scalars,total_scalars\n";
}

std::string metrics_row(const federation::RoundRecord& rec) {
  return std::to_string(rec.round) + "," + fmt(rec.test_accuracy) + "," + fmt(rec.train_loss) +
         "," + fmt(rec.train_accuracy) + "," + std::to_string(rec.accumulated) + "," +
         std::to_string(rec.sudden) + "," + std::to_string(rec.hard_resets) + "," +
         std::to_string(rec.inversions) + "," + std::to_string(rec.uplink_scalars) + "," +
         std::to_string(rec.total_scalars) + "\n";
}

AppendFile::AppendFile(const std::filesystem::path& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + ": " + std::strerror(errno));
  }
}

AppendFile::~AppendFile() {
  if (fd_ >= 0) ::close(fd_);
}

void AppendFile::append(const std::string& text) {
  const ssize_t n = ::write(fd_, text.data(), text.size());
  if (n != static_cast<ssize_t>(text.size())) {
    throw Error(ErrorCode::IoFailure, "short write to " + path_.string());
  }
}

RunResult run_experiment(const config::ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                         const std::function<void(const federation::RoundRecord&)>& on_round) {
  Experiment e = build(cfg);
  federation::Federation fed(cfg.federation, e.train, e.test, e.partition, e.init);

  std::unique_ptr<AppendFile> metrics;
  std::unique_ptr<AppendFile> anomalies;
  std::unique_ptr<AppendFile> timing;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string());
    {
      std::ofstream side(out_dir / "config.json");
      if (!side) throw Error(ErrorCode::IoFailure, "cannot write config.json");
      side << config::to_json(cfg).dump(2) << "\n";
    }
    metrics = std::make_unique<AppendFile>(out_dir / "metrics.csv");
    metrics->append(metrics_header());
    anomalies = std::make_unique<AppendFile>(out_dir / "anomalies.csv");
    anomalies->append("round,client,epoch,score,verdict\n");
    timing = std::make_unique<AppendFile>(out_dir / "timing.csv");
    timing->append("round,wall_ms\n");
  }

  RunResult result;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    auto rec = fed.run_round();
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (metrics) {
      std::string events;
      for (const auto& rep : rec.reports) {
        for (const auto& ev : rep.events) {
          events += std::to_string(ev.round + 1) + "," + std::to_string(ev.client) + "," +
                    std::to_string(ev.epoch) + "," + fmt(ev.score) + "," +
                    stability::to_string(ev.verdict) + "\n";
        }
      }
      if (!events.empty()) anomalies->append(events);
      timing->append(std::to_string(rec.round) + "," + fmt(ms) + "\n");
      metrics->append(metrics_row(rec));
    }
    if (on_round) on_round(rec);
    // Per-client detail is only needed by callers watching rounds live.
    rec.reports.clear();
    result.records.push_back(std::move(rec));
  }
  result.final_params = fed.global().params;
  return result;
}

std::vector<SuiteEntry> run_audit_suite(const std::string& suite, std::uint64_t seed) {
  const bool all = suite == "all";
  if (!all && suite != "rank" && suite != "condition" && suite != "descent" && suite != "drift") {
    throw Error(ErrorCode::InvalidArgument, "unknown audit suite '" + suite + "'");
  }
  std::vector<SuiteEntry> out;
  if (all || suite == "rank") {
    Rng rng = make_stream(seed, 0, 0, StreamTag::Audit);
    out.push_back({diagnostics::rank_deficiency_demo(20, 5, {1e-1, 1e-2, 1e-3, 1e-4}, rng, 100), false});
  }
  if (all || suite == "condition") {
    out.push_back({diagnostics::condition_number_trial(diagnostics::make_diagonal_quadratic(100.0, 10), 200),
                   false});
    auto iso = diagnostics::condition_number_trial(diagnostics::make_diagonal_quadratic(1.0, 10), 5);
    iso.name = "condition_isotropic";
    out.push_back({iso, false});
  }
  if (all || suite == "descent") {
    data::SyntheticSpec spec{16, 4, 512, 3.0};
    Rng drng = make_stream(seed, 0, 0, StreamTag::DatasetSamples);
    const auto ds = data::make_synthetic_classification(spec, drng);
    model::Network net = model::make_dense_network(spec.dim, {16}, spec.classes);
    Rng irng = make_stream(seed, 0, 0, StreamTag::Init);
    net.initialize(irng);
    diagnostics::DescentAuditConfig dc;
    dc.seed = seed;
    kfac::KfacConfig kc;
    kc.t_inv = 5;
    out.push_back({diagnostics::descent_audit_network(net, ds, kc, dc), false});

    const auto quad = diagnostics::make_diagonal_quadratic(10.0, 8);
    const Matrix identity = Matrix::Identity(8, 8);
    auto pos = diagnostics::descent_audit_quadratic(quad, identity, 0.01, dc);
    out.push_back({pos, false});
    dc.eta_multiplier = 10.0;
    auto neg = diagnostics::descent_audit_quadratic(quad, identity, 0.01, dc);
    neg.name = "descent_quadratic_10x_eta";
    out.push_back({neg, true});
  }
  if (all || suite == "drift") {
    auto cfg = diagnostics::default_drift_config(seed);
    out.push_back({diagnostics::drift_audit(cfg), false});
    cfg.federation.local.stability.enabled = false;
    cfg.federation.local.kfac.t_inv = 200;
    cfg.federation.local.fault.kind = federation::FaultKind::SingularFactor;
    cfg.federation.local.fault.epoch = 3;
    auto neg = diagnostics::drift_audit(cfg);
    neg.name = "drift_singular_factor_monitor_off";
    out.push_back({neg, true});
  }
  return out;
}

nlohmann::json to_json(const SuiteEntry& entry) {
  const auto& r = entry.report;
  nlohmann::json values = nlohmann::json::object();
  for (const auto& [k, v] : r.values) values[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(fmt(v));
  return {{"name", r.name},
          {"negative_control", entry.negative_control},
          {"trials", r.trials},
          {"violations", r.violations},
          {"worst_margin", std::isfinite(r.worst_margin) ? nlohmann::json(r.worst_margin)
                                                         : nlohmann::json(fmt(r.worst_margin))},
          {"audit_passed", r.passed},
          {"ok", entry.ok()},
          {"values", values}};
}

void append_reports(const std::filesystem::path& path, const std::vector<SuiteEntry>& entries) {
  nlohmann::json doc = nlohmann::json::array();
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::FormatError, path.string() + ": " + e.what());
    }
    if (!doc.is_array()) throw Error(ErrorCode::FormatError, path.string() + ": not a JSON array");
  }
  for (const auto& e : entries) doc.push_back(to_json(e));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace fedrco::harness
