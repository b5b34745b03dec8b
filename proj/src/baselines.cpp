#include "fedrco/baselines.hpp"

#include <cmath>

#include "fedrco/error.hpp"

namespace fedrco::baselines {
namespace {

void require_same(const model::Params& a, const model::Params& b, const char* what) {
  if (!model::same_shape(a, b)) throw Error(ErrorCode::ShapeMismatch, what);
}

}  // namespace

model::Params sgd_local_step(const model::Params& params, const model::Params& grad, double lr) {
  require_same(params, grad, "sgd_local_step: gradient shape differs from parameters");
  model::Params out = params;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * grad[i];
  return out;
}

model::Params fedprox_local_step(const model::Params& params, const model::Params& grad,
                                 double lr, double mu, const model::Params& anchor) {
  require_same(params, grad, "fedprox_local_step: gradient shape differs from parameters");
  require_same(params, anchor, "fedprox_local_step: anchor shape differs from parameters");
  if (!(mu >= 0.0)) throw Error(ErrorCode::InvalidArgument, "fedprox_local_step: mu must be >= 0");
  model::Params out = params;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= lr * (grad[i] + mu * (params[i] - anchor[i]));
  }
  return out;
}

ServerOptState make_server_state(ServerMode mode, const ServerOptConfig& cfg,
                                 const model::Params& like) {
  ServerOptState s;
  s.mode = mode;
  s.cfg = cfg;
  s.velocity = model::zeros_like(like);
  s.second = model::zeros_like(like);
  return s;
}

model::Params server_adaptive_aggregate(ServerOptState& state, const model::Params& global,
                                        const model::Params& pseudo_grad) {
  require_same(global, pseudo_grad, "server_adaptive_aggregate: pseudo-gradient shape");
  model::Params out = global;
  switch (state.mode) {
    case ServerMode::Plain:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pseudo_grad[i];
      break;
    case ServerMode::Momentum:
      require_same(global, state.velocity, "server_adaptive_aggregate: momentum buffer shape");
      for (std::size_t i = 0; i < out.size(); ++i) {
        state.velocity[i] = state.cfg.momentum * state.velocity[i] + pseudo_grad[i];
        out[i] -= state.cfg.lr * state.velocity[i];
      }
      break;
    case ServerMode::Adam: {
      require_same(global, state.velocity, "server_adaptive_aggregate: moment buffer shape");
      const double t = static_cast<double>(state.steps + 1);
      const double c1 = 1.0 - std::pow(state.cfg.beta1, t);
      const double c2 = 1.0 - std::pow(state.cfg.beta2, t);
      for (std::size_t i = 0; i < out.size(); ++i) {
        state.velocity[i] =
            state.cfg.beta1 * state.velocity[i] + (1.0 - state.cfg.beta1) * pseudo_grad[i];
        state.second[i] = state.cfg.beta2 * state.second[i] +
                          (1.0 - state.cfg.beta2) * pseudo_grad[i].cwiseAbs2();
        const Matrix m_hat = state.velocity[i] / c1;
        const Matrix v_hat = state.second[i] / c2;
        out[i].array() -= state.cfg.lr * m_hat.array() / (v_hat.array().sqrt() + state.cfg.adam_eps);
      }
      break;
    }
  }
  ++state.steps;
  return out;
}

}  // namespace fedrco::baselines
