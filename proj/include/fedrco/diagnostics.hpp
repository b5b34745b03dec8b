#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedrco/data.hpp"
#include "fedrco/federation.hpp"
#include "fedrco/kfac.hpp"
#include "fedrco/model.hpp"
#include "fedrco/numerics.hpp"
#include "fedrco/rng.hpp"

namespace fedrco::diagnostics {

struct AuditReport {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;
  // Smallest (bound - measured) over trials; negative when violated.
  double worst_margin = 0.0;
  bool passed = false;
  // Named scalar results, in insertion order.
  std::vector<std::pair<std::string, double>> values;

  double value(const std::string& key) const;
};

/// Empirical Fisher from B Gaussian rank-one terms in dimension d. Checks the
/// rank is B on every draw, then fits the log-log slope of
/// ||(F + eps I)^{-1} g|| against eps. With null_component false, g is drawn
/// from the range of F and the slope is near zero. Passes when all ranks equal
/// B and the slope lies in [-1.1, -0.9] (null_component) or [-0.1, 0.1].
AuditReport rank_deficiency_demo(std::size_t d, std::size_t batch,
                                 const std::vector<double>& eps_grid, Rng& rng,
                                 std::size_t draws = 100, bool null_component = true);

// Quadratic 0.5 (theta - theta*)^T H (theta - theta*) with symmetric PD H.
struct QuadraticProblem {
  Matrix hessian;
  Vector optimum;

  double kappa() const;
};

// H = diag(linspace(1, kappa, dim)), theta* = 0.
QuadraticProblem make_diagonal_quadratic(double kappa, std::size_t dim);

/// Gradient descent with step 2/(lambda_max + lambda_min): the asymptotic
/// per-step error contraction must match (kappa - 1)/(kappa + 1) within 1e-3.
/// Newton steps (eta = 1) must reach error <= 1e-10 within two steps.
AuditReport condition_number_trial(const QuadraticProblem& prob, std::size_t steps);

struct DescentAuditConfig {
  std::size_t trials = 40;
  std::size_t probe_batches = 64;
  std::size_t batch_size = 32;
  // Multiple of the admissible step lambda_min / (L lambda_max^2).
  double eta_multiplier = 1.0;
  // Relative slack applied to every estimated constant.
  double slack = 0.2;
  double pass_fraction = 0.95;
  // Training between trials on the network audit.
  double train_lr = 0.05;
  std::size_t steps_between = 5;
  std::size_t power_iterations = 30;
  std::uint64_t seed = 0;
};

/// Checks E[L(theta - eta P g)] <= L(theta) - eta lambda_min/2 ||grad||^2
///   + eta^2 L sigma^2 lambda_max^2 / 2
/// at points along a K-FAC training trajectory, with P the frozen K-FAC
/// preconditioner, L from Hessian-vector power iteration and sigma^2 from
/// probe mini-batches.
AuditReport descent_audit_network(model::Network net, const data::Dataset& data,
                                  const kfac::KfacConfig& kfac_cfg,
                                  const DescentAuditConfig& cfg);

/// Same inequality on a stochastic quadratic with gradient noise of total
/// variance noise_var and a fixed SPD preconditioner. Trial points lie along
/// the top curvature direction.
AuditReport descent_audit_quadratic(const QuadraticProblem& prob, const Matrix& preconditioner,
                                    double noise_var, const DescentAuditConfig& cfg);

struct DriftAuditConfig {
  federation::FederationConfig federation;
  data::SyntheticSpec data;
  std::size_t test_samples = 400;
  double dirichlet_alpha = 0.5;
  std::size_t hidden = 32;
  std::size_t rounds = 6;
};

// Small defaults: 6 clients, K = 10, plain aggregation, monitor on.
DriftAuditConfig default_drift_config(std::uint64_t seed);

/// Runs a federation and checks, every round,
///   mean_c ||theta_c,K - theta_t||^2 <= 2 K^2 eta^2 lambda_max^2 (sigma^2 + M^2)
/// with sigma^2 the round's mean gradient-noise estimate, M^2 the largest
/// squared full local gradient norm seen, and lambda_max the largest spectral
/// norm of any inverse produced by a regular refresh during the run.
AuditReport drift_audit(const DriftAuditConfig& cfg);

}  // namespace fedrco::diagnostics
