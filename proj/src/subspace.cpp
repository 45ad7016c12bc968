#include "headsim/subspace.hpp"

#include <algorithm>
#include <string>

#include <Eigen/SVD>

#include "headsim/error.hpp"

namespace headsim {
namespace {

void check_compatible(const Subspace& a, const Subspace& b) {
  if (a.ambient_dim() != b.ambient_dim())
    throw InvalidArgument("subspaces live in different ambient dimensions (" +
                          std::to_string(a.ambient_dim()) + " vs " +
                          std::to_string(b.ambient_dim()) + ")");
  if (a.dim() != b.dim())
    throw InvalidArgument("subspace dimension mismatch (" + std::to_string(a.dim()) +
                          " vs " + std::to_string(b.dim()) + ")");
}

}  // namespace

Subspace Subspace::from_orthonormal(Matrix basis) {
  const auto m = basis.cols();
  if (m < 1 || m > basis.rows())
    throw InvalidArgument("subspace basis must be d x m with 1 <= m <= d");
  const Matrix gram = basis.transpose() * basis;
  const double err = (gram - Matrix::Identity(m, m)).cwiseAbs().maxCoeff();
  if (err > 1e-10)
    throw InvalidArgument("basis is not orthonormal (max |U^T U - I| = " +
                          std::to_string(err) + ")");
  return Subspace(std::move(basis));
}

Subspace orthonormalize(const Matrix& w, double rank_tol) {
  const auto m = w.cols();
  if (m < 1 || m > w.rows())
    throw InvalidArgument("orthonormalize: need d x m input with 1 <= m <= d");
  Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU);
  const Vector& s = svd.singularValues();
  const double cutoff = rank_tol * s(0);
  const auto rank = std::count_if(s.data(), s.data() + s.size(),
                                  [&](double v) { return v > cutoff; });
  if (s(0) == 0.0 || rank < m)
    throw NumericalError("rank deficiency: numerical rank " + std::to_string(rank) +
                         " < " + std::to_string(m));
  return Subspace(svd.matrixU());
}

PrincipalAngleSpectrum principal_angles(const Subspace& a, const Subspace& b) {
  check_compatible(a, b);
  const Matrix cross = a.basis().transpose() * b.basis();
  Eigen::JacobiSVD<Matrix> svd(cross);
  PrincipalAngleSpectrum out{svd.singularValues().cwiseMax(0.0).cwiseMin(1.0)};
  return out;
}

double projection_kernel(const Subspace& a, const Subspace& b) {
  const Vector c = principal_angles(a, b).cosines;
  return c.squaredNorm();
}

double projection_kernel_trace(const Subspace& a, const Subspace& b) {
  check_compatible(a, b);
  const Matrix pa = a.basis() * a.basis().transpose();
  const Matrix pb = b.basis() * b.basis().transpose();
  // Both projectors are symmetric, so tr(P_A P_B) is their elementwise inner product.
  return pa.cwiseProduct(pb).sum();
}

double normalized_pk(const Subspace& a, const Subspace& b) {
  return projection_kernel(a, b) / static_cast<double>(a.dim());
}

double projection_kernel_unchecked(const Matrix& a, const Matrix& b) {
  return (a.transpose() * b).squaredNorm();
}

}  // namespace headsim
