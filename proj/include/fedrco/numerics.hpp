#pragma once

#include <Eigen/Dense>
#include <cstddef>

namespace fedrco {

// Dense real matrices are the common currency for weights, gradients and
// curvature factors. Storage is Eigen's default column-major layout.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace numerics {

inline constexpr double kSymmetryTolerance = 1e-10;
inline constexpr double kDefaultRankTolerance = 1e-8;

bool all_finite(const Matrix& m);

// (M + M^T) / 2. Throws NonSquare.
Matrix symmetrize(const Matrix& m);

// ||M - M^T||_F <= tol * max(||M||_F, 1). Throws NonSquare.
bool is_symmetric(const Matrix& m, double tol = kSymmetryTolerance);

/// Returns (M + ridge * I)^{-1} through a Cholesky factorization of the
/// symmetrized input.
///
/// Throws NonSquare, AsymmetricInput (beyond kSymmetryTolerance), InvalidArgument
/// for ridge <= 0, and FactorizationFailure when M + ridge * I is not
/// numerically positive definite. The last case means the input was not PSD.
Matrix damped_symmetric_inverse(const Matrix& m, double ridge);

// Eigenvalues of a symmetric matrix in ascending order.
Vector symmetric_eigenvalues(const Matrix& m);

/// Number of eigenvalues strictly greater than tol * lambda_max.
std::size_t spectral_rank(const Matrix& m, double tol = kDefaultRankTolerance);

// Dense Kronecker product; quadratic memory, meant for small oracle checks.
Matrix kronecker(const Matrix& a, const Matrix& b);

// Column-stacking vec and its inverse.
Vector vec(const Matrix& m);
Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols);

}  // namespace numerics
}  // namespace fedrco
