#include "fedrco/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "fedrco/error.hpp"

namespace fedrco::federation {
namespace {

using stability::AnomalyVerdict;

bool is_second_order(Method m) { return m == Method::FedRCO || m == Method::FedRCOOri; }

void scale(model::Params& p, double s) {
  for (auto& m : p) m *= s;
}

void apply_fault(const FaultSpec& fault, std::size_t epoch, model::Params& dir) {
  switch (fault.kind) {
    case FaultKind::GradientScale:
      if (epoch == fault.epoch) scale(dir, fault.factor);
      break;
    case FaultKind::GeometricGrowth:
      if (epoch >= fault.epoch) {
        scale(dir, std::pow(fault.ratio, static_cast<double>(epoch - fault.epoch + 1)));
      }
      break;
    case FaultKind::NonFinite:
      if (epoch == fault.epoch && !dir.empty()) {
        dir[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
      }
      break;
    case FaultKind::None:
    case FaultKind::SingularFactor:
      break;
  }
}

// Cycles through shuffled local indices, reshuffling when a full batch no
// longer fits.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng& rng)
      : order_(n), batch_(std::min(batch, n)), pos_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::span<const std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::span<const std::size_t> out(order_.data() + pos_, batch_);
    pos_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_;
  Rng& rng_;
};

}  // namespace

const char* to_string(Method method) {
  switch (method) {
    case Method::FedRCO: return "fedrco";
    case Method::FedRCOOri: return "fedrco_ori";
    case Method::FedAvg: return "fedavg";
    case Method::FedProx: return "fedprox";
    case Method::FedAvgM: return "fedavgm";
    case Method::FedAdam: return "fedadam";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::FedRCO, Method::FedRCOOri, Method::FedAvg, Method::FedProx,
                   Method::FedAvgM, Method::FedAdam}) {
    if (name == to_string(m)) return m;
  }
  throw Error(ErrorCode::ConfigInvalid, "method: unknown value '" + name + "'");
}

bool FaultSpec::targets(std::size_t round_index, std::size_t client_id) const {
  if (kind == FaultKind::None) return false;
  const bool round_ok = round < 0 || static_cast<std::size_t>(round) == round_index;
  const bool client_ok = client < 0 || static_cast<std::size_t>(client) == client_id;
  return round_ok && client_ok;
}

std::vector<std::size_t> sample_participants(std::size_t num_clients, double ratio, Rng& rng) {
  if (num_clients == 0) throw Error(ErrorCode::InvalidArgument, "sample_participants: no clients");
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "sample_participants: ratio must lie in (0, 1]");
  }
  const auto m = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(num_clients))));
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

model::Params aggregate_weighted(std::span<const Upload> uploads) {
  if (uploads.empty()) throw Error(ErrorCode::InvalidArgument, "aggregate_weighted: no uploads");
  double total = 0.0;
  for (const auto& u : uploads) {
    if (!model::same_shape(*u.params, *uploads.front().params)) {
      throw Error(ErrorCode::ShapeMismatch, "aggregate_weighted: upload shapes differ");
    }
    total += static_cast<double>(u.data_size);
  }
  if (!(total > 0.0)) throw Error(ErrorCode::InvalidArgument, "aggregate_weighted: no data");
  if (uploads.size() == 1) return *uploads.front().params;
  model::Params out = model::zeros_like(*uploads.front().params);
  for (const auto& u : uploads) model::axpy(out, static_cast<double>(u.data_size) / total, *u.params);
  return out;
}

void adaptive_pull(ClientState& client, const GlobalState& global, const AggregationConfig& cfg) {
  const double local_acc = client.local_accuracy;
  const double global_acc = global.accuracy;
  if (!(local_acc > global_acc)) {
    client.net.set_params(global.params);
    return;
  }
  double gamma = local_acc / (local_acc + global_acc);
  if (cfg.swap_gamma) gamma = 1.0 - gamma;
  model::Params blended = global.params;
  const model::Params& local = client.net.params();
  for (std::size_t i = 0; i < blended.size(); ++i) {
    blended[i] = gamma * global.params[i] + (1.0 - gamma) * local[i];
  }
  client.net.set_params(std::move(blended));
}

LocalReport run_local_round(ClientState& client, const GlobalState& global,
                            const LocalConfig& cfg, std::uint64_t seed) {
  if (cfg.local_steps == 0) throw Error(ErrorCode::InvalidArgument, "local_steps must be >= 1");
  if (client.data_size() == 0) {
    throw Error(ErrorCode::EmptyDataset, "client " + std::to_string(client.id) + " has no data");
  }
  LocalReport report;
  report.client = client.id;
  report.data_size = client.data_size();

  Rng rng = make_stream(seed, global.round, client.id, StreamTag::Batching);
  BatchSampler sampler(client.data_size(), cfg.batch_size, rng);
  const model::Params start = client.net.params();
  const bool second_order = is_second_order(cfg.method);
  const bool use_kfac = second_order && !cfg.kfac.identity_preconditioner;
  const bool monitor = second_order && cfg.stability.enabled;
  const bool faulty = second_order && cfg.fault.targets(global.round, client.id);
  const std::size_t inversions_before = client.kfac.inversions;
  client.kfac.track_spectrum = client.kfac.track_spectrum || cfg.audit_drift;
  client.history.clear();
  client.consecutive_low = 0;

  model::BackwardOptions options;
  options.capture = use_kfac;
  options.gamma_normalization = cfg.kfac.conv_gamma_norm;

  double sigma_sum = 0.0;
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.local_steps; ++epoch) {
    const auto idx = sampler.next();
    Matrix x(client.data.features.rows(), static_cast<Eigen::Index>(idx.size()));
    batch_labels.resize(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      x.col(static_cast<Eigen::Index>(j)) = client.data.features.col(static_cast<Eigen::Index>(idx[j]));
      batch_labels[j] = client.data.labels[idx[j]];
    }
    auto fb = model::forward_backward(client.net, x, batch_labels, options);
    report.step_losses.push_back(fb.loss);

    if (cfg.audit_drift) {
      model::BackwardOptions plain;
      plain.capture = false;
      const auto full =
          model::forward_backward(client.net, client.data.features, client.data.labels, plain);
      sigma_sum += model::squared_distance(fb.grads, full.grads);
      report.grad_bound_sq = std::max(report.grad_bound_sq, model::squared_norm(full.grads));
    }

    if (cfg.method == Method::FedProx) {
      client.net.set_params(baselines::fedprox_local_step(client.net.params(), fb.grads, cfg.lr,
                                                          cfg.prox_mu, global.params));
      report.applied_norms.push_back(stability::total_norm(fb.grads));
      continue;
    }
    if (!second_order) {
      client.net.set_params(baselines::sgd_local_step(client.net.params(), fb.grads, cfg.lr));
      report.applied_norms.push_back(stability::total_norm(fb.grads));
      continue;
    }

    model::Params dir;
    bool degenerate = false;
    if (use_kfac) {
      if (faulty && cfg.fault.kind == FaultKind::SingularFactor && epoch == cfg.fault.epoch) {
        kfac::inject_singular_factor(client.kfac);
      }
      try {
        dir = kfac::natural_gradient(client.kfac, fb.grads, fb.capture, cfg.kfac);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateTrace) throw;
        degenerate = true;
      }
    } else {
      dir = std::move(fb.grads);
    }
    if (faulty && !degenerate) apply_fault(cfg.fault, epoch, dir);

    if (!monitor) {
      if (degenerate) {
        report.applied_norms.push_back(0.0);
        continue;
      }
      report.applied_norms.push_back(stability::total_norm(dir));
      client.net.set_params(baselines::sgd_local_step(client.net.params(), dir, cfg.lr));
      continue;
    }

    const double norm =
        degenerate ? std::numeric_limits<double>::infinity() : stability::total_norm(dir);
    double score = 0.0;
    if (!std::isfinite(norm)) {
      score = std::numeric_limits<double>::infinity();
    } else if (client.history.size() >= cfg.stability.warmup) {
      score = stability::anomaly_score(norm, client.history, cfg.stability.xi);
    }
    const AnomalyVerdict verdict =
        stability::classify(score, client.consecutive_low, cfg.stability);
    if (verdict != AnomalyVerdict::Normal) {
      report.events.push_back({global.round, client.id, epoch, score, verdict});
    }
    switch (verdict) {
      case AnomalyVerdict::Normal:
        client.consecutive_low = 0;
        client.net.set_params(baselines::sgd_local_step(client.net.params(), dir, cfg.lr));
        client.history.push(norm);
        report.applied_norms.push_back(norm);
        break;
      case AnomalyVerdict::AccumulatedDivergence: {
        ++report.accumulated;
        ++client.consecutive_low;
        double applied = norm;
        if (norm > cfg.stability.grad_stable) {
          dir = stability::soft_rollback(dir, cfg.stability.grad_stable);
          applied = cfg.stability.grad_stable;
        }
        client.net.set_params(baselines::sgd_local_step(client.net.params(), dir, cfg.lr));
        client.history.push(applied);
        report.applied_norms.push_back(applied);
        break;
      }
      case AnomalyVerdict::SuddenExplosion:
        ++report.sudden;
        ++report.hard_resets;
        stability::hard_reset(client, global.params);
        report.applied_norms.push_back(0.0);
        break;
    }
  }

  report.inversions = client.kfac.inversions - inversions_before;
  report.mean_loss = std::accumulate(report.step_losses.begin(), report.step_losses.end(), 0.0) /
                     static_cast<double>(report.step_losses.size());
  report.drift_sq = model::squared_distance(client.net.params(), start);
  report.sigma_sq = sigma_sum / static_cast<double>(cfg.local_steps);
  report.local_accuracy = model::all_finite(client.net.params())
                              ? model::evaluate_accuracy(client.net, client.data)
                              : 0.0;
  client.local_accuracy = report.local_accuracy;
  return report;
}

void validate(const FederationConfig& cfg) {
  if (cfg.clients == 0) throw Error(ErrorCode::InvalidArgument, "clients must be positive");
  if (!(cfg.ratio > 0.0 && cfg.ratio <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "ratio must lie in (0, 1]");
  }
  if (cfg.local.local_steps == 0) throw Error(ErrorCode::InvalidArgument, "local_epochs must be positive");
  if (cfg.local.batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch_size must be positive");
  if (!(cfg.local.lr > 0.0) || !std::isfinite(cfg.local.lr)) {
    throw Error(ErrorCode::InvalidArgument, "lr must be positive");
  }
  if (!(cfg.local.prox_mu >= 0.0)) throw Error(ErrorCode::InvalidArgument, "fedprox.mu must be >= 0");
  if (cfg.workers == 0) throw Error(ErrorCode::InvalidArgument, "workers must be positive");
  kfac::validate(cfg.local.kfac);
  stability::validate(cfg.local.stability);
}

Federation::Federation(FederationConfig cfg, const data::Dataset& train, data::Dataset test,
                       const data::Partition& partition, const model::Network& init)
    : cfg_(std::move(cfg)), test_(std::move(test)), template_(init) {
  validate(cfg_);
  if (partition.num_clients() != cfg_.clients) {
    throw Error(ErrorCode::InvalidArgument,
                "partition has " + std::to_string(partition.num_clients()) + " clients, config " +
                    std::to_string(cfg_.clients));
  }
  if (cfg_.local.method == Method::FedRCOOri) cfg_.aggregation.strategy = AggregationStrategy::Plain;
  global_.params = init.params();
  global_.accuracy = test_.size() > 0 ? model::evaluate_accuracy(init, test_) : 0.0;
  clients_.reserve(cfg_.clients);
  for (std::size_t c = 0; c < cfg_.clients; ++c) {
    clients_.emplace_back(c, init, train.subset(partition.clients[c]), cfg_.local.stability.window);
  }
  const auto mode = cfg_.local.method == Method::FedAvgM  ? baselines::ServerMode::Momentum
                    : cfg_.local.method == Method::FedAdam ? baselines::ServerMode::Adam
                                                           : baselines::ServerMode::Plain;
  server_ = baselines::make_server_state(mode, cfg_.server, global_.params);
}

model::Network Federation::global_network() const {
  model::Network net = template_;
  net.set_params(global_.params);
  return net;
}

RoundRecord Federation::run_round() {
  RoundRecord rec;
  rec.round = global_.round + 1;
  Rng prng = make_stream(cfg_.seed, global_.round, 0, StreamTag::Participation);
  rec.participants = sample_participants(cfg_.clients, cfg_.ratio, prng);

  const bool pull = cfg_.local.method == Method::FedRCO &&
                    cfg_.aggregation.strategy == AggregationStrategy::Adaptive;
  for (std::size_t id : rec.participants) {
    ClientState& c = clients_[id];
    if (pull && c.synced) {
      adaptive_pull(c, global_, cfg_.aggregation);
    } else {
      c.net.set_params(global_.params);
    }
    c.synced = true;
  }

  rec.reports.resize(rec.participants.size());
  std::vector<std::exception_ptr> failures(rec.participants.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < rec.participants.size(); i = next++) {
      try {
        rec.reports[i] = run_local_round(clients_[rec.participants[i]], global_, cfg_.local, cfg_.seed);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(cfg_.workers, rec.participants.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  std::vector<Upload> uploads;
  for (std::size_t id : rec.participants) {
    uploads.push_back({&clients_[id].net.params(), clients_[id].data_size()});
  }
  model::Params aggregate = aggregate_weighted(uploads);
  if (server_.mode == baselines::ServerMode::Plain) {
    global_.params = std::move(aggregate);
  } else {
    model::Params pseudo = global_.params;
    model::axpy(pseudo, -1.0, aggregate);
    global_.params = baselines::server_adaptive_aggregate(server_, global_.params, pseudo);
  }
  ++global_.round;
  model::Network net = global_network();
  global_.accuracy = model::all_finite(global_.params) && test_.size() > 0
                         ? model::evaluate_accuracy(net, test_)
                         : 0.0;

  const double p = static_cast<double>(rec.participants.size());
  for (const auto& r : rec.reports) {
    rec.train_loss += r.mean_loss / p;
    rec.train_accuracy += r.local_accuracy / p;
    rec.accumulated += r.accumulated;
    rec.sudden += r.sudden;
    rec.hard_resets += r.hard_resets;
    rec.inversions += r.inversions;
  }
  const std::size_t d = template_.parameter_count();
  rec.uplink_scalars = rec.participants.size() * (d + 1);
  rec.total_scalars = rec.participants.size() * (2 * d + 1);
  rec.test_accuracy = global_.accuracy;
  return rec;
}

}  // namespace fedrco::federation
