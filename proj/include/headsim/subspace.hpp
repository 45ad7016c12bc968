#pragma once

// Principal angles and the Projection Kernel between equal-dimension
// subspaces of R^d.

#include "headsim/types.hpp"

namespace headsim {

inline constexpr double kRankTolerance = 1e-10;

// An m-dimensional subspace held through an orthonormal d x m basis.
class Subspace {
 public:
  // Takes an already-orthonormal basis; checked to 1e-10 max-abs on the Gram.
  static Subspace from_orthonormal(Matrix basis);

  const Matrix& basis() const { return basis_; }
  Eigen::Index dim() const { return basis_.cols(); }
  Eigen::Index ambient_dim() const { return basis_.rows(); }

 private:
  friend Subspace orthonormalize(const Matrix& w, double rank_tol);
  explicit Subspace(Matrix basis) : basis_(std::move(basis)) {}
  Matrix basis_;
};

// Cosines of the principal angles, nonincreasing, each in [0, 1].
struct PrincipalAngleSpectrum {
  Vector cosines;
};

// Orthonormal basis of span(W) via thin SVD. Throws NumericalError naming the
// numerical rank when the smallest singular value falls below
// rank_tol * largest.
Subspace orthonormalize(const Matrix& w, double rank_tol = kRankTolerance);

PrincipalAngleSpectrum principal_angles(const Subspace& a, const Subspace& b);

// ||A^T B||_F^2 = sum_i cos^2(theta_i), in [0, m].
double projection_kernel(const Subspace& a, const Subspace& b);

// tr(P_A P_B) with P = U U^T materialized; O(d^2 m). Independent of the
// singular-value route above.
double projection_kernel_trace(const Subspace& a, const Subspace& b);

// PK / m, in [0, 1].
double normalized_pk(const Subspace& a, const Subspace& b);

// ||A^T B||_F^2 on raw orthonormal bases, no checks. Used in hot loops where
// the bases come from orthonormalize().
double projection_kernel_unchecked(const Matrix& a, const Matrix& b);

}  // namespace headsim
