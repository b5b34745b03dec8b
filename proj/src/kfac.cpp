#include "fedrco/kfac.hpp"

#include <cmath>
#include <string>

#include "fedrco/error.hpp"

namespace fedrco::kfac {
namespace {

constexpr double kTraceFloor = 1e-30;

Matrix covariance(const Matrix& x, double count) {
  Matrix c = Matrix::Zero(x.rows(), x.rows());
  c.selfadjointView<Eigen::Lower>().rankUpdate(x, 1.0 / count);
  c.triangularView<Eigen::StrictlyUpper>() = c.transpose();
  return c;
}

}  // namespace

void validate(const KfacConfig& cfg) {
  if (!(cfg.ema_alpha > 0.0 && cfg.ema_alpha <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "kfac.ema_alpha must lie in (0, 1]");
  }
  if (!(cfg.damping_eps > 0.0) || !std::isfinite(cfg.damping_eps)) {
    throw Error(ErrorCode::InvalidArgument, "kfac.eps must be positive");
  }
  if (cfg.t_inv == 0) throw Error(ErrorCode::InvalidArgument, "kfac.t_inv must be positive");
}

void accumulate_factors(KfacLayerState& state, const model::LayerCapture& capture,
                        double alpha) {
  const Matrix& a = capture.activations;
  const Matrix& g = capture.preact_grads;
  if (a.cols() == 0 || g.cols() == 0 || !(capture.activation_count > 0.0) ||
      !(capture.gradient_count > 0.0)) {
    throw Error(ErrorCode::ShapeMismatch, "accumulate_factors: empty capture");
  }
  if (state.initialized &&
      (state.omega.rows() != a.rows() || state.gamma.rows() != g.rows())) {
    throw Error(ErrorCode::ShapeMismatch,
                "accumulate_factors: capture is " + std::to_string(a.rows()) + "/" +
                    std::to_string(g.rows()) + ", state is " + std::to_string(state.omega.rows()) +
                    "/" + std::to_string(state.gamma.rows()));
  }
  Matrix omega_batch = covariance(a, capture.activation_count);
  Matrix gamma_batch = covariance(g, capture.gradient_count);
  if (!state.initialized) {
    state.omega = std::move(omega_batch);
    state.gamma = std::move(gamma_batch);
    state.initialized = true;
    return;
  }
  state.omega = numerics::symmetrize(alpha * omega_batch + (1.0 - alpha) * state.omega);
  state.gamma = numerics::symmetrize(alpha * gamma_batch + (1.0 - alpha) * state.gamma);
}

double pi_correction(const Matrix& omega, const Matrix& gamma, PiMode mode) {
  const double tr_o = omega.trace();
  const double tr_g = gamma.trace();
  if (!(tr_o > kTraceFloor) || !(tr_g > kTraceFloor) || !std::isfinite(tr_o) ||
      !std::isfinite(tr_g)) {
    throw Error(ErrorCode::DegenerateTrace, "pi_correction: traces " + std::to_string(tr_o) +
                                                " and " + std::to_string(tr_g));
  }
  if (mode == PiMode::Literal) return std::sqrt(tr_o / tr_g);
  return std::sqrt((tr_o / static_cast<double>(omega.rows())) /
                   (tr_g / static_cast<double>(gamma.rows())));
}

bool refresh_inverses_if_due(KfacLayerState& state, const KfacConfig& cfg) {
  if (!state.initialized) {
    throw Error(ErrorCode::InvalidArgument, "refresh_inverses_if_due: factors not initialized");
  }
  if (state.inverses_ready() && state.steps_since_inversion < cfg.t_inv) {
    ++state.steps_since_inversion;
    return false;
  }
  const double pi = pi_correction(state.omega, state.gamma, cfg.pi_mode);
  const double root_eps = std::sqrt(cfg.damping_eps);
  state.omega_inv = numerics::damped_symmetric_inverse(state.omega, pi * root_eps);
  state.gamma_inv = numerics::damped_symmetric_inverse(state.gamma, root_eps / pi);
  state.pi = pi;
  state.steps_since_inversion = 1;
  return true;
}

Matrix precondition_gradient(const Matrix& grad, const KfacLayerState& state) {
  if (!state.inverses_ready()) {
    throw Error(ErrorCode::InversesNotReady, "precondition_gradient: no cached inverses");
  }
  if (grad.rows() != state.gamma_inv->rows() || grad.cols() != state.omega_inv->rows()) {
    throw Error(ErrorCode::ShapeMismatch, "precondition_gradient: gradient is " +
                                              std::to_string(grad.rows()) + "x" +
                                              std::to_string(grad.cols()));
  }
  return *state.gamma_inv * grad * *state.omega_inv;
}

double inverse_spectral_norm(const KfacLayerState& state) {
  if (!state.inverses_ready()) {
    throw Error(ErrorCode::InversesNotReady, "inverse_spectral_norm: no cached inverses");
  }
  return numerics::symmetric_eigenvalues(*state.omega_inv).maxCoeff() *
         numerics::symmetric_eigenvalues(*state.gamma_inv).maxCoeff();
}

void KfacState::clear() {
  for (auto& layer : layers) layer = KfacLayerState{};
}

KfacState make_state(const model::Network& net) {
  KfacState s;
  s.layers.resize(net.params().size());
  return s;
}

model::Params natural_gradient(KfacState& state, const model::Params& grads,
                               const model::BatchCapture& capture, const KfacConfig& cfg) {
  if (grads.size() != state.layers.size() || capture.layers.size() != state.layers.size()) {
    throw Error(ErrorCode::ShapeMismatch, "natural_gradient: layer count mismatch");
  }
  model::Params out(grads.size());
  bool inverted = false;
  for (std::size_t l = 0; l < grads.size(); ++l) {
    accumulate_factors(state.layers[l], capture.layers[l], cfg.ema_alpha);
    inverted = refresh_inverses_if_due(state.layers[l], cfg) || inverted;
    out[l] = precondition_gradient(grads[l], state.layers[l]);
  }
  if (inverted) {
    ++state.inversions;
    if (state.track_spectrum) {
      for (const auto& layer : state.layers) {
        state.max_inverse_norm = std::max(state.max_inverse_norm, inverse_spectral_norm(layer));
      }
    }
  }
  return out;
}

void inject_singular_factor(KfacState& state, double ridge) {
  for (auto& layer : state.layers) {
    if (!layer.initialized) continue;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(layer.omega);
    const Eigen::Index top = layer.omega.rows() - 1;
    const Vector v = eig.eigenvectors().col(top);
    const double lambda = eig.eigenvalues()(top);
    // (lambda v v^T + ridge I)^{-1} in closed form
    const Matrix outer = v * v.transpose();
    const auto n = layer.omega.rows();
    layer.omega_inv = (Matrix::Identity(n, n) - outer) / ridge + outer / (lambda + ridge);
  }
}

}  // namespace fedrco::kfac
