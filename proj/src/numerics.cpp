#include "fedrco/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedrco/error.hpp"

namespace fedrco::numerics {
namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw Error(ErrorCode::NonSquare,
                std::string(what) + ": expected a non-empty square matrix, got " +
                    std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix symmetrize(const Matrix& m) {
  require_square(m, "symmetrize");
  return 0.5 * (m + m.transpose());
}

bool is_symmetric(const Matrix& m, double tol) {
  require_square(m, "is_symmetric");
  const double scale = std::max(m.norm(), 1.0);
  return (m - m.transpose()).norm() <= tol * scale;
}

Matrix damped_symmetric_inverse(const Matrix& m, double ridge) {
  require_square(m, "damped_symmetric_inverse");
  if (!(ridge > 0.0) || !std::isfinite(ridge)) {
    throw Error(ErrorCode::InvalidArgument,
                "damped_symmetric_inverse: ridge must be positive and finite");
  }
  if (!m.allFinite() || !is_symmetric(m)) {
    throw Error(ErrorCode::AsymmetricInput,
                "damped_symmetric_inverse: input is not symmetric");
  }
  Matrix damped = symmetrize(m);
  damped.diagonal().array() += ridge;

  Eigen::LLT<Matrix> llt(damped);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::FactorizationFailure,
                "damped_symmetric_inverse: M + ridge*I is not positive definite");
  }
  Matrix inv = llt.solve(Matrix::Identity(m.rows(), m.cols()));
  if (!inv.allFinite()) {
    throw Error(ErrorCode::FactorizationFailure,
                "damped_symmetric_inverse: non-finite inverse");
  }
  return 0.5 * (inv + inv.transpose());
}

Vector symmetric_eigenvalues(const Matrix& m) {
  require_square(m, "symmetric_eigenvalues");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetrize(m),
                                               Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::FactorizationFailure,
                "symmetric_eigenvalues: solver did not converge");
  }
  return solver.eigenvalues();
}

std::size_t spectral_rank(const Matrix& m, double tol) {
  const Vector eig = symmetric_eigenvalues(m);
  const double lambda_max = eig.maxCoeff();
  if (!(lambda_max > 0.0)) return 0;
  const double cutoff = tol * lambda_max;
  return static_cast<std::size_t>((eig.array() > cutoff).count());
}

Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

Vector vec(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) {
    throw Error(ErrorCode::ShapeMismatch, "unvec: length does not match shape");
  }
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

}  // namespace fedrco::numerics
