#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedrco/baselines.hpp"
#include "fedrco/client.hpp"
#include "fedrco/data.hpp"
#include "fedrco/kfac.hpp"
#include "fedrco/model.hpp"
#include "fedrco/rng.hpp"
#include "fedrco/stability.hpp"

namespace fedrco::federation {

enum class Method { FedRCO, FedRCOOri, FedAvg, FedProx, FedAvgM, FedAdam };

const char* to_string(Method method);
// Throws ConfigInvalid for unknown names.
Method parse_method(const std::string& name);

enum class AggregationStrategy { Adaptive, Plain };

struct AggregationConfig {
  AggregationStrategy strategy = AggregationStrategy::Adaptive;
  // Use (1 - gamma) as the weight of the global model when blending.
  bool swap_gamma = false;
};

enum class FaultKind { None, GradientScale, GeometricGrowth, SingularFactor, NonFinite };

/// Deliberate corruption of the second-order client update, for tests and
/// audits. round/client of -1 match every round/client.
///   GradientScale    multiplies the update at `epoch` by `factor`.
///   GeometricGrowth  multiplies the update at epoch e >= `epoch` by ratio^(e - epoch + 1).
///   SingularFactor   swaps in a rank-one omega inverse just before `epoch`.
///   NonFinite        writes a NaN into the update at `epoch`.
struct FaultSpec {
  FaultKind kind = FaultKind::None;
  long round = -1;
  long client = -1;
  std::size_t epoch = 0;
  double factor = 1e4;
  double ratio = 1.5;

  bool targets(std::size_t round_index, std::size_t client_id) const;
};

struct LocalConfig {
  Method method = Method::FedRCO;
  std::size_t local_steps = 20;
  std::size_t batch_size = 32;
  double lr = 0.00625;
  double prox_mu = 0.01;
  kfac::KfacConfig kfac;
  stability::StabilityConfig stability;
  FaultSpec fault;
  // Collect the plug-in constants of the client drift bound. Costs one full
  // local gradient per step.
  bool audit_drift = false;
};

struct GlobalState {
  model::Params params;
  std::size_t round = 0;  // completed rounds
  double accuracy = 0.0;  // Acc: test accuracy of params
};

struct AnomalyEvent {
  std::size_t round = 0;
  std::size_t client = 0;
  std::size_t epoch = 0;
  double score = 0.0;
  stability::AnomalyVerdict verdict = stability::AnomalyVerdict::Normal;
};

struct LocalReport {
  std::size_t client = 0;
  std::size_t data_size = 0;
  double mean_loss = 0.0;
  double local_accuracy = 0.0;
  std::vector<double> step_losses;
  // Norm of the update actually applied at each step (0 when skipped).
  std::vector<double> applied_norms;
  std::size_t accumulated = 0;
  std::size_t sudden = 0;
  std::size_t hard_resets = 0;
  std::size_t inversions = 0;
  std::vector<AnomalyEvent> events;
  // ||theta_end - theta_start||^2 over the round.
  double drift_sq = 0.0;
  // Mean ||g_k - grad_k||^2 and max ||grad_k||^2 along the round (audit only).
  double sigma_sq = 0.0;
  double grad_bound_sq = 0.0;
};

// round(ratio * C) distinct ids (at least one), sorted ascending.
// Throws InvalidArgument for ratio outside (0, 1] or C == 0.
std::vector<std::size_t> sample_participants(std::size_t num_clients, double ratio, Rng& rng);

struct Upload {
  const model::Params* params = nullptr;
  std::size_t data_size = 0;
};

/// sum_c (n_c / n) theta_c with n the total over the uploads, accumulated in
/// the given order. Throws ShapeMismatch, InvalidArgument when empty.
model::Params aggregate_weighted(std::span<const Upload> uploads);

/// If Acc' > Acc: gamma = Acc' / (Acc' + Acc) and the client becomes
/// gamma * global + (1 - gamma) * local. Otherwise the client takes the
/// global parameters. Curvature state is kept either way.
void adaptive_pull(ClientState& client, const GlobalState& global, const AggregationConfig& cfg);

/// K single-mini-batch steps of the configured local optimizer, starting
/// from the client's current parameters. SuddenExplosion verdicts reset the
/// client to global.params and training continues.
LocalReport run_local_round(ClientState& client, const GlobalState& global,
                            const LocalConfig& cfg, std::uint64_t seed);

struct FederationConfig {
  std::size_t clients = 20;
  double ratio = 0.8;
  LocalConfig local;
  AggregationConfig aggregation;
  baselines::ServerOptConfig server;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
};

// Throws InvalidArgument naming the offending field.
void validate(const FederationConfig& cfg);

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::size_t accumulated = 0;
  std::size_t sudden = 0;
  std::size_t hard_resets = 0;
  std::size_t inversions = 0;
  // participants * (d + 1): parameters plus one accuracy scalar each.
  std::size_t uplink_scalars = 0;
  // Uplink plus the global model sent to each participant.
  std::size_t total_scalars = 0;
  std::vector<std::size_t> participants;
  std::vector<LocalReport> reports;
};

class Federation {
 public:
  /// Builds one client per partition entry; every client starts from `init`.
  /// Throws InvalidArgument when the partition size differs from cfg.clients.
  Federation(FederationConfig cfg, const data::Dataset& train, data::Dataset test,
             const data::Partition& partition, const model::Network& init);

  RoundRecord run_round();

  const GlobalState& global() const { return global_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  std::vector<ClientState>& clients() { return clients_; }
  const FederationConfig& config() const { return cfg_; }
  model::Network global_network() const;

 private:
  FederationConfig cfg_;
  data::Dataset test_;
  model::Network template_;
  GlobalState global_;
  std::vector<ClientState> clients_;
  baselines::ServerOptState server_;
};

}  // namespace fedrco::federation
