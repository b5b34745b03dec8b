#include "fedrco/stability.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fedrco/client.hpp"
#include "fedrco/error.hpp"

namespace fedrco::stability {

const char* to_string(AnomalyVerdict verdict) {
  switch (verdict) {
    case AnomalyVerdict::Normal: return "normal";
    case AnomalyVerdict::AccumulatedDivergence: return "accumulated_divergence";
    case AnomalyVerdict::SuddenExplosion: return "sudden_explosion";
  }
  return "unknown";
}

void validate(const StabilityConfig& cfg) {
  if (!(cfg.tau_low > 1.0 && cfg.tau_high > cfg.tau_low)) {
    throw Error(ErrorCode::InvalidArgument, "stability: need 1 < tau_low < tau_high");
  }
  if (!(cfg.xi > 0.0)) throw Error(ErrorCode::InvalidArgument, "stability.xi must be positive");
  if (!(cfg.grad_stable > 0.0) || !std::isfinite(cfg.grad_stable)) {
    throw Error(ErrorCode::InvalidArgument, "stability.grad_stable must be positive");
  }
  if (cfg.window == 0) throw Error(ErrorCode::InvalidArgument, "stability.window must be positive");
  if (cfg.warmup > cfg.window) {
    throw Error(ErrorCode::InvalidArgument, "stability.warmup cannot exceed stability.window");
  }
}

NormHistory::NormHistory(std::size_t capacity) : values_(capacity, 0.0) {
  if (capacity == 0) throw Error(ErrorCode::InvalidArgument, "NormHistory: zero capacity");
}

void NormHistory::push(double norm) {
  if (!(norm >= 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorCode::InvalidArgument, "NormHistory: bad norm " + std::to_string(norm));
  }
  values_[next_] = norm;
  next_ = (next_ + 1) % values_.size();
  if (count_ < values_.size()) ++count_;
}

void NormHistory::clear() {
  std::fill(values_.begin(), values_.end(), 0.0);
  next_ = 0;
  count_ = 0;
}

double NormHistory::mean() const {
  if (count_ == 0) return 0.0;
  // Unused slots hold zero, so summing the whole buffer is exact.
  return std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(count_);
}

double total_norm(const model::Params& grads) {
  double sum = 0.0;
  for (const auto& g : grads) {
    if (!g.allFinite()) return std::numeric_limits<double>::infinity();
    sum += g.norm();
  }
  return std::isfinite(sum) ? sum : std::numeric_limits<double>::infinity();
}

double anomaly_score(double current, const NormHistory& hist, double xi) {
  if (!(xi > 0.0)) throw Error(ErrorCode::InvalidArgument, "anomaly_score: xi must be positive");
  if (!std::isfinite(current)) return std::numeric_limits<double>::infinity();
  if (hist.empty()) return 0.0;
  return current / (hist.mean() + xi);
}

AnomalyVerdict classify(double score, std::size_t consecutive_low, const StabilityConfig& cfg) {
  if (std::isnan(score) || score >= cfg.tau_high) return AnomalyVerdict::SuddenExplosion;
  if (score <= cfg.tau_low) return AnomalyVerdict::Normal;
  if (consecutive_low >= cfg.max_consecutive) return AnomalyVerdict::SuddenExplosion;
  return AnomalyVerdict::AccumulatedDivergence;
}

model::Params soft_rollback(const model::Params& grads, double grad_stable) {
  if (!(grad_stable > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "soft_rollback: grad_stable must be positive");
  }
  const double norm = total_norm(grads);
  if (norm == 0.0) throw Error(ErrorCode::ZeroGradient, "soft_rollback: zero gradient");
  if (!std::isfinite(norm)) {
    throw Error(ErrorCode::InvalidArgument, "soft_rollback: non-finite gradient");
  }
  model::Params out = grads;
  if (norm == grad_stable) return out;
  const double scale = grad_stable / norm;
  for (auto& g : out) g *= scale;
  return out;
}

void hard_reset(ClientState& client, const model::Params& global_params) {
  client.kfac.clear();
  client.history.clear();
  client.consecutive_low = 0;
  client.net.set_params(global_params);
}

}  // namespace fedrco::stability
