#pragma once

#include <cstddef>

#include "fedrco/model.hpp"

namespace fedrco::baselines {

// theta - lr * grad. Throws ShapeMismatch.
model::Params sgd_local_step(const model::Params& params, const model::Params& grad, double lr);

// theta - lr * (grad + mu * (theta - anchor)). Throws ShapeMismatch,
// InvalidArgument for mu < 0.
model::Params fedprox_local_step(const model::Params& params, const model::Params& grad,
                                 double lr, double mu, const model::Params& anchor);

enum class ServerMode { Plain, Momentum, Adam };

struct ServerOptConfig {
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-3;
  double lr = 1.0;
};

struct ServerOptState {
  ServerMode mode = ServerMode::Plain;
  ServerOptConfig cfg;
  model::Params velocity;  // momentum buffer, or Adam's first moment
  model::Params second;    // Adam's second moment
  std::size_t steps = 0;
};

ServerOptState make_server_state(ServerMode mode, const ServerOptConfig& cfg,
                                 const model::Params& like);

/// Applies one server optimizer step to the global parameters given the
/// pseudo-gradient (global - aggregate).
/// Momentum: v <- beta v + d; theta <- theta - lr v.
/// Adam: bias-corrected moments of d; theta <- theta - lr m_hat / (sqrt(v_hat) + eps).
/// Plain mode returns theta - d. Throws ShapeMismatch.
model::Params server_adaptive_aggregate(ServerOptState& state, const model::Params& global,
                                        const model::Params& pseudo_grad);

}  // namespace fedrco::baselines
