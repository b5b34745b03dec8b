#pragma once

#include <cstddef>
#include <vector>

#include "fedrco/model.hpp"

namespace fedrco {
struct ClientState;
}

namespace fedrco::stability {

enum class AnomalyVerdict { Normal, AccumulatedDivergence, SuddenExplosion };

const char* to_string(AnomalyVerdict verdict);

struct StabilityConfig {
  bool enabled = true;
  double tau_low = 10.0;
  double tau_high = 1000.0;
  double xi = 1e-8;
  double grad_stable = 10.0;
  std::size_t window = 10;
  std::size_t max_consecutive = 3;
  // Steps scored as Normal until the history holds this many entries.
  std::size_t warmup = 3;
};

// Throws InvalidArgument naming the offending field.
void validate(const StabilityConfig& cfg);

// Ring buffer of the most recent applied update norms.
class NormHistory {
 public:
  explicit NormHistory(std::size_t capacity = 10);

  // Throws InvalidArgument for negative or non-finite values.
  void push(double norm);
  void clear();
  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  std::size_t capacity() const { return values_.size(); }
  double mean() const;

 private:
  std::vector<double> values_;
  std::size_t next_ = 0;
  std::size_t count_ = 0;
};

// Sum of per-layer Frobenius norms; +inf if any entry is NaN or infinite.
double total_norm(const model::Params& grads);

/// current / (mean(hist) + xi); 0 when the history is empty and +inf when the
/// current norm is not finite. Throws InvalidArgument for xi <= 0.
double anomaly_score(double current, const NormHistory& hist, double xi);

/// Thresholds S against tau_low/tau_high. A divergence that has already been
/// seen max_consecutive times in a row escalates to SuddenExplosion.
AnomalyVerdict classify(double score, std::size_t consecutive_low, const StabilityConfig& cfg);

/// Rescales all layers by one factor so the total norm equals grad_stable.
/// Throws ZeroGradient when the total norm is zero, InvalidArgument when it is
/// not finite or grad_stable <= 0.
model::Params soft_rollback(const model::Params& grads, double grad_stable);

/// Drops all curvature state and history, zeroes the counters and copies the
/// global parameters into the client.
void hard_reset(ClientState& client, const model::Params& global_params);

}  // namespace fedrco::stability
