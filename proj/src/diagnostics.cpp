#include "fedrco/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fedrco/error.hpp"

namespace fedrco::diagnostics {
namespace {

Vector gaussian_vector(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  return v;
}

double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

double inner(const model::Params& a, const model::Params& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i].array() * b[i].array()).sum();
  return s;
}

model::Params full_gradient(const model::Network& net, const data::Dataset& ds) {
  model::BackwardOptions opts;
  opts.capture = false;
  return model::forward_backward(net, ds.features, ds.labels, opts).grads;
}

double full_loss(const model::Network& net, const data::Dataset& ds) {
  return model::mean_loss(net, ds.features, ds.labels);
}

model::Params batch_gradient(const model::Network& net, const data::Dataset& ds,
                             std::span<const std::size_t> idx) {
  const data::Dataset batch = ds.subset(idx);
  return full_gradient(net, batch);
}

std::vector<std::size_t> draw_batch(std::size_t n, std::size_t b, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t m = std::min(n, b);
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(m);
  return all;
}

model::Params precondition_all(const std::vector<kfac::KfacLayerState>& layers,
                               const model::Params& g) {
  model::Params out(g.size());
  for (std::size_t l = 0; l < g.size(); ++l) out[l] = kfac::precondition_gradient(g[l], layers[l]);
  return out;
}

// Largest-magnitude Hessian eigenvalue of the full-data loss by power
// iteration on central-difference Hessian-vector products.
double smoothness_estimate(const model::Network& net, const data::Dataset& ds,
                           std::size_t iterations, Rng& rng) {
  model::Params v = model::zeros_like(net.params());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& m : v) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  }
  constexpr double h = 1e-4;
  double lambda = 0.0;
  model::Network probe = net;
  for (std::size_t it = 0; it < iterations; ++it) {
    const double nv = std::sqrt(model::squared_norm(v));
    for (auto& m : v) m /= nv;
    model::Params plus = net.params();
    model::axpy(plus, h, v);
    probe.set_params(plus);
    const model::Params gp = full_gradient(probe, ds);
    model::Params minus = net.params();
    model::axpy(minus, -h, v);
    probe.set_params(minus);
    model::Params hv = full_gradient(probe, ds);
    for (std::size_t l = 0; l < hv.size(); ++l) hv[l] = (gp[l] - hv[l]) / (2.0 * h);
    lambda = std::sqrt(model::squared_norm(hv));
    if (lambda == 0.0) break;
    v = std::move(hv);
  }
  return lambda;
}

void finish(AuditReport& r, double pass_fraction) {
  const double ok = static_cast<double>(r.trials - r.violations);
  r.passed = r.trials > 0 && ok >= pass_fraction * static_cast<double>(r.trials);
}

}  // namespace

double AuditReport::value(const std::string& key) const {
  for (const auto& [k, v] : values) {
    if (k == key) return v;
  }
  throw Error(ErrorCode::InvalidArgument, "audit report has no value '" + key + "'");
}

AuditReport rank_deficiency_demo(std::size_t d, std::size_t batch,
                                 const std::vector<double>& eps_grid, Rng& rng,
                                 std::size_t draws, bool null_component) {
  if (batch == 0 || batch >= d) {
    throw Error(ErrorCode::InvalidArgument, "rank_deficiency_demo: need 0 < B < d");
  }
  if (eps_grid.size() < 2 || draws == 0) {
    throw Error(ErrorCode::InvalidArgument, "rank_deficiency_demo: need >= 2 eps values");
  }
  AuditReport r;
  r.name = "rank";
  r.trials = draws;
  std::vector<double> log_eps;
  for (double e : eps_grid) log_eps.push_back(std::log(e));
  double slope_sum = 0.0;
  double slope_min = std::numeric_limits<double>::infinity();
  double slope_max = -slope_min;
  std::size_t rank_max = 0;
  for (std::size_t t = 0; t < draws; ++t) {
    Matrix g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(batch));
    for (std::size_t b = 0; b < batch; ++b) g.col(static_cast<Eigen::Index>(b)) = gaussian_vector(d, rng);
    const Matrix fisher = numerics::symmetrize(g * g.transpose() / static_cast<double>(batch));
    const std::size_t rank = numerics::spectral_rank(fisher);
    rank_max = std::max(rank_max, rank);
    if (rank != batch) ++r.violations;
    const Vector dir = null_component ? gaussian_vector(d, rng)
                                      : Vector(fisher * gaussian_vector(d, rng));
    std::vector<double> log_norm;
    for (double e : eps_grid) {
      log_norm.push_back(std::log((numerics::damped_symmetric_inverse(fisher, e) * dir).norm()));
    }
    const double slope = least_squares_slope(log_eps, log_norm);
    slope_sum += slope;
    slope_min = std::min(slope_min, slope);
    slope_max = std::max(slope_max, slope);
  }
  const double slope = slope_sum / static_cast<double>(draws);
  const double target = null_component ? -1.0 : 0.0;
  r.worst_margin = 0.1 - std::abs(slope - target);
  r.passed = r.violations == 0 && std::abs(slope - target) <= 0.1;
  r.values = {{"slope", slope},
              {"slope_min", slope_min},
              {"slope_max", slope_max},
              {"max_rank", static_cast<double>(rank_max)},
              {"batch", static_cast<double>(batch)}};
  return r;
}

double QuadraticProblem::kappa() const {
  const Vector ev = numerics::symmetric_eigenvalues(hessian);
  return ev(ev.size() - 1) / ev(0);
}

QuadraticProblem make_diagonal_quadratic(double kappa, std::size_t dim) {
  if (!(kappa >= 1.0) || dim == 0) {
    throw Error(ErrorCode::InvalidArgument, "make_diagonal_quadratic: need kappa >= 1, dim > 0");
  }
  QuadraticProblem p;
  p.hessian = Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    const double t = dim == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(dim - 1);
    p.hessian(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0 + t * (kappa - 1.0);
  }
  p.optimum = Vector::Zero(static_cast<Eigen::Index>(dim));
  return p;
}

AuditReport condition_number_trial(const QuadraticProblem& prob, std::size_t steps) {
  if (steps == 0) throw Error(ErrorCode::InvalidArgument, "condition_number_trial: steps == 0");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(prob.hessian);
  const Vector& ev = eig.eigenvalues();
  const double lmin = ev(0);
  const double lmax = ev(ev.size() - 1);
  const double kappa = lmax / lmin;
  const double eta = 2.0 / (lmax + lmin);
  const Vector worst = eig.eigenvectors().col(0);

  Vector theta = prob.optimum + Vector::Ones(prob.optimum.size());
  double contraction = 0.0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double before = std::abs(worst.dot(theta - prob.optimum));
    theta -= eta * (prob.hessian * (theta - prob.optimum));
    const double after = std::abs(worst.dot(theta - prob.optimum));
    contraction = before == 0.0 ? 0.0 : after / before;
  }
  const double predicted = (kappa - 1.0) / (kappa + 1.0);

  const Matrix h_inv = numerics::damped_symmetric_inverse(prob.hessian, 1e-300);
  Vector newton = prob.optimum + Vector::Ones(prob.optimum.size());
  std::size_t newton_steps = 0;
  while ((newton - prob.optimum).norm() > 1e-10 && newton_steps < 10) {
    newton -= h_inv * (prob.hessian * (newton - prob.optimum));
    ++newton_steps;
  }

  AuditReport r;
  r.name = "condition";
  r.trials = 2;
  const double gap = std::abs(contraction - predicted);
  if (gap > 1e-3) ++r.violations;
  if (newton_steps > 2) ++r.violations;
  r.worst_margin = 1e-3 - gap;
  r.passed = r.violations == 0;
  r.values = {{"kappa", kappa},
              {"contraction", contraction},
              {"predicted", predicted},
              {"newton_steps", static_cast<double>(newton_steps)}};
  return r;
}

AuditReport descent_audit_network(model::Network net, const data::Dataset& data,
                                  const kfac::KfacConfig& kfac_cfg,
                                  const DescentAuditConfig& cfg) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "descent audit: empty dataset");
  Rng rng = make_stream(cfg.seed, 0, 0, StreamTag::Audit);
  kfac::KfacState state = kfac::make_state(net);
  const double s = 1.0 + cfg.slack;

  auto train = [&](std::size_t steps) {
    for (std::size_t k = 0; k < steps; ++k) {
      const auto idx = draw_batch(data.size(), cfg.batch_size, rng);
      const data::Dataset b = data.subset(idx);
      const auto fb = model::forward_backward(net, b.features, b.labels);
      const auto dir = kfac::natural_gradient(state, fb.grads, fb.capture, kfac_cfg);
      model::axpy(net.params(), -cfg.train_lr, dir);
    }
  };

  AuditReport r;
  r.name = "descent";
  r.trials = cfg.trials;
  r.worst_margin = std::numeric_limits<double>::infinity();
  double eta_sum = 0.0;
  double ratio_max = 0.0;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    train(std::max<std::size_t>(cfg.steps_between, 1));
    const auto& layers = state.layers;
    double pmin = std::numeric_limits<double>::infinity();
    double pmax = 0.0;
    for (const auto& l : layers) {
      const Vector eo = numerics::symmetric_eigenvalues(*l.omega_inv);
      const Vector eg = numerics::symmetric_eigenvalues(*l.gamma_inv);
      pmin = std::min(pmin, eo(0) * eg(0));
      pmax = std::max(pmax, eo(eo.size() - 1) * eg(eg.size() - 1));
    }
    const double lam_min = pmin / s;
    const double lam_max = pmax * s;
    const double smooth = s * smoothness_estimate(net, data, cfg.power_iterations, rng);
    const model::Params grad = full_gradient(net, data);
    const double grad_sq = model::squared_norm(grad);
    const double loss0 = full_loss(net, data);
    const double eta = cfg.eta_multiplier * lam_min / (smooth * lam_max * lam_max);

    std::vector<model::Params> probes;
    double sigma = 0.0;
    for (std::size_t b = 0; b < cfg.probe_batches; ++b) {
      probes.push_back(batch_gradient(net, data, draw_batch(data.size(), cfg.batch_size, rng)));
      sigma += model::squared_distance(probes.back(), grad);
    }
    sigma = s * sigma / static_cast<double>(cfg.probe_batches);

    model::Network moved = net;
    double lhs = 0.0;
    for (const auto& g : probes) {
      const model::Params pg = precondition_all(layers, g);
      model::Params theta = net.params();
      model::axpy(theta, -eta, pg);
      moved.set_params(std::move(theta));
      model::Params noise = g;
      model::axpy(noise, -1.0, grad);
      lhs += full_loss(moved, data) + eta * inner(grad, precondition_all(layers, noise));
    }
    lhs /= static_cast<double>(probes.size());
    const double rhs = loss0 - eta * lam_min / 2.0 * grad_sq +
                       eta * eta * smooth * sigma * lam_max * lam_max / 2.0;
    const double margin = rhs - lhs;
    if (!(margin >= 0.0)) ++r.violations;
    r.worst_margin = std::min(r.worst_margin, margin);
    eta_sum += eta;
    const double decrease = loss0 - lhs;
    if (decrease > 0.0) ratio_max = std::max(ratio_max, decrease);
  }
  finish(r, cfg.pass_fraction);
  r.values = {{"mean_eta", eta_sum / static_cast<double>(cfg.trials)},
              {"max_expected_decrease", ratio_max},
              {"violation_fraction",
               static_cast<double>(r.violations) / static_cast<double>(r.trials)}};
  return r;
}

AuditReport descent_audit_quadratic(const QuadraticProblem& prob, const Matrix& preconditioner,
                                    double noise_var, const DescentAuditConfig& cfg) {
  const Eigen::Index d = prob.hessian.rows();
  if (preconditioner.rows() != d || preconditioner.cols() != d) {
    throw Error(ErrorCode::ShapeMismatch, "descent_audit_quadratic: preconditioner shape");
  }
  Rng rng = make_stream(cfg.seed, 0, 1, StreamTag::Audit);
  const double s = 1.0 + cfg.slack;
  Eigen::SelfAdjointEigenSolver<Matrix> heig(prob.hessian);
  const Vector top = heig.eigenvectors().col(d - 1);
  const double smooth = s * heig.eigenvalues()(d - 1);
  const Vector pev = numerics::symmetric_eigenvalues(preconditioner);
  const double lam_min = pev(0) / s;
  const double lam_max = pev(d - 1) * s;
  const double eta = cfg.eta_multiplier * lam_min / (smooth * lam_max * lam_max);
  const double noise_scale = std::sqrt(noise_var / static_cast<double>(d));
  auto loss = [&](const Vector& th) {
    const Vector e = th - prob.optimum;
    return 0.5 * e.dot(prob.hessian * e);
  };

  AuditReport r;
  r.name = "descent_quadratic";
  r.trials = cfg.trials;
  r.worst_margin = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const Vector theta = prob.optimum + top + 0.05 * gaussian_vector(static_cast<std::size_t>(d), rng);
    const Vector grad = prob.hessian * (theta - prob.optimum);
    std::vector<Vector> noise;
    double sigma = 0.0;
    for (std::size_t b = 0; b < cfg.probe_batches; ++b) {
      noise.push_back(noise_scale * gaussian_vector(static_cast<std::size_t>(d), rng));
      sigma += noise.back().squaredNorm();
    }
    sigma = s * sigma / static_cast<double>(cfg.probe_batches);
    double lhs = 0.0;
    for (const auto& n : noise) {
      lhs += loss(theta - eta * preconditioner * (grad + n)) + eta * grad.dot(preconditioner * n);
    }
    lhs /= static_cast<double>(noise.size());
    const double rhs = loss(theta) - eta * lam_min / 2.0 * grad.squaredNorm() +
                       eta * eta * smooth * sigma * lam_max * lam_max / 2.0;
    const double margin = rhs - lhs;
    if (!(margin >= 0.0)) ++r.violations;
    r.worst_margin = std::min(r.worst_margin, margin);
  }
  finish(r, cfg.pass_fraction);
  r.values = {{"eta", eta},
              {"violation_fraction",
               static_cast<double>(r.violations) / static_cast<double>(r.trials)}};
  return r;
}

DriftAuditConfig default_drift_config(std::uint64_t seed) {
  DriftAuditConfig c;
  c.federation.clients = 6;
  c.federation.ratio = 1.0;
  c.federation.seed = seed;
  c.federation.local.method = federation::Method::FedRCO;
  c.federation.local.local_steps = 10;
  c.federation.local.batch_size = 32;
  c.federation.local.lr = 0.05;
  c.federation.local.kfac.t_inv = 5;
  c.federation.aggregation.strategy = federation::AggregationStrategy::Plain;
  c.data.dim = 16;
  c.data.classes = 4;
  c.data.samples = 1200;
  c.data.separation = 3.0;
  return c;
}

AuditReport drift_audit(const DriftAuditConfig& cfg) {
  federation::FederationConfig fc = cfg.federation;
  fc.local.audit_drift = true;
  fc.aggregation.strategy = federation::AggregationStrategy::Plain;
  const auto split = data::make_synthetic_split(cfg.data, cfg.test_samples, fc.seed);
  Rng prng = make_stream(fc.seed, 0, 0, StreamTag::Partition);
  const auto partition = data::dirichlet_partition(split.train, fc.clients, cfg.dirichlet_alpha, prng);
  model::Network net = model::make_dense_network(cfg.data.dim, {cfg.hidden}, cfg.data.classes);
  Rng irng = make_stream(fc.seed, 0, 0, StreamTag::Init);
  net.initialize(irng);
  federation::Federation fed(fc, split.train, split.test, partition, net);

  struct RoundStats {
    double drift = 0.0;
    double sigma = 0.0;
    double grad_sq = 0.0;
  };
  std::vector<RoundStats> rounds;
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto rec = fed.run_round();
    RoundStats st;
    const double p = static_cast<double>(rec.reports.size());
    for (const auto& rep : rec.reports) {
      st.drift += rep.drift_sq / p;
      st.sigma += rep.sigma_sq / p;
      st.grad_sq = std::max(st.grad_sq, rep.grad_bound_sq);
    }
    rounds.push_back(st);
  }

  const bool second_order = fc.local.method == federation::Method::FedRCO ||
                            fc.local.method == federation::Method::FedRCOOri;
  double lambda = 1.0;
  if (second_order && !fc.local.kfac.identity_preconditioner) {
    lambda = 0.0;
    for (const auto& c : fed.clients()) lambda = std::max(lambda, c.kfac.max_inverse_norm);
  }
  const double k = static_cast<double>(fc.local.local_steps);
  const double eta = fc.local.lr;

  AuditReport r;
  r.name = "drift";
  r.trials = rounds.size();
  r.worst_margin = std::numeric_limits<double>::infinity();
  double worst_ratio = 0.0;
  for (const auto& st : rounds) {
    const double bound = 2.0 * k * k * eta * eta * lambda * lambda * (st.sigma + st.grad_sq);
    const double margin = bound - st.drift;
    if (!(st.drift <= bound)) {
      ++r.violations;
      worst_ratio = std::numeric_limits<double>::infinity();
    } else if (bound > 0.0) {
      worst_ratio = std::max(worst_ratio, st.drift / bound);
    }
    r.worst_margin = std::isnan(margin) ? -std::numeric_limits<double>::infinity()
                                        : std::min(r.worst_margin, margin);
  }
  r.passed = r.trials > 0 && r.violations == 0;
  r.values = {{"lambda_max", lambda},
              {"worst_drift_to_bound", worst_ratio},
              {"rounds", static_cast<double>(rounds.size())}};
  return r;
}

}  // namespace fedrco::diagnostics
