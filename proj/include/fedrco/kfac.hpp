#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "fedrco/model.hpp"
#include "fedrco/numerics.hpp"

namespace fedrco::kfac {

// Normalized: pi = sqrt((tr(omega)/d_in) / (tr(gamma)/d_out)).
// Literal: pi = sqrt(tr(omega) / tr(gamma)).
enum class PiMode { Normalized, Literal };

struct KfacConfig {
  double ema_alpha = 0.95;
  double damping_eps = 0.03;
  std::size_t t_inv = 200;
  PiMode pi_mode = PiMode::Normalized;
  model::GammaNormalization conv_gamma_norm = model::GammaNormalization::Positions;
  // Skip curvature entirely and apply raw gradients.
  bool identity_preconditioner = false;
};

// Throws InvalidArgument naming the offending field.
void validate(const KfacConfig& cfg);

struct KfacLayerState {
  Matrix omega;  // d_in x d_in, d_in counts the bias row
  Matrix gamma;  // d_out x d_out
  std::optional<Matrix> omega_inv;
  std::optional<Matrix> gamma_inv;
  std::size_t steps_since_inversion = 0;
  bool initialized = false;
  double pi = 1.0;

  bool inverses_ready() const { return omega_inv.has_value() && gamma_inv.has_value(); }
};

/// EMA update of both factors from one layer's batch capture. The first call
/// seeds the averages with the batch estimate. Throws ShapeMismatch.
void accumulate_factors(KfacLayerState& state, const model::LayerCapture& capture,
                        double alpha);

// Throws DegenerateTrace when either trace is <= 1e-30.
double pi_correction(const Matrix& omega, const Matrix& gamma, PiMode mode);

/// Recomputes both damped inverses when the clock has reached t_inv or no
/// inverses exist yet; the clock then restarts at 1. Otherwise the clock
/// advances by one. Returns true when an inversion happened.
/// Throws InvalidArgument when the state is uninitialized, DegenerateTrace.
bool refresh_inverses_if_due(KfacLayerState& state, const KfacConfig& cfg);

// gamma_inv * grad * omega_inv. Throws InversesNotReady, ShapeMismatch.
Matrix precondition_gradient(const Matrix& grad, const KfacLayerState& state);

// Largest eigenvalue of omega_inv times largest eigenvalue of gamma_inv, the
// spectral norm of the layer's Kronecker inverse.
double inverse_spectral_norm(const KfacLayerState& state);

// Curvature state of one client: one entry per parameterized layer, all on a
// shared inversion clock.
struct KfacState {
  std::vector<KfacLayerState> layers;
  std::size_t inversions = 0;
  // Largest inverse_spectral_norm seen right after a refresh, when tracked.
  bool track_spectrum = false;
  double max_inverse_norm = 0.0;

  void clear();
};

KfacState make_state(const model::Network& net);

/// One optimizer step's curvature work: accumulate, refresh if due and
/// precondition every layer. Returns the preconditioned direction.
model::Params natural_gradient(KfacState& state, const model::Params& grads,
                               const model::BatchCapture& capture, const KfacConfig& cfg);

/// Replaces every cached omega inverse with the inverse of a rank-one factor
/// under a vanishing ridge. Used only by fault injection.
void inject_singular_factor(KfacState& state, double ridge = 1e-6);

}  // namespace fedrco::kfac
