#pragma once

#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "dspo/errors.hpp"

namespace dspo {

/// Block normal equations
///   [ B   E ] [dx]   [v]
///   [ E^T C ] [dy] = [w]
/// with C diagonal (stored as a vector).
struct LinearSystem {
  Eigen::MatrixXd B;
  Eigen::SparseMatrix<double> E;  // column-major
  Eigen::VectorXd C;
  Eigen::VectorXd v;
  Eigen::VectorXd w;

  Eigen::Index pose_dim() const { return B.rows(); }
  Eigen::Index point_dim() const { return C.size(); }
};

struct SchurSolution {
  Eigen::VectorXd dx;  // reduced (pose-like) unknowns
  Eigen::VectorXd dy;  // diagonal-block unknowns
};

/// Eliminates the diagonal block and solves the reduced system by Cholesky:
///   dx = (B - E C^-1 E^T)^-1 (v - E C^-1 w),  dy = C^-1 (w - E^T dx).
/// Throws NotPositiveDefinite when C has a non-positive entry or the reduced
/// matrix fails to factor.
inline SchurSolution schur_solve(const LinearSystem& sys) {
  const Eigen::Index n = sys.pose_dim();
  const Eigen::Index m = sys.point_dim();
  if ((sys.C.array() <= 0.0).any()) throw NotPositiveDefinite();

  Eigen::MatrixXd s = sys.B;
  Eigen::VectorXd rhs = sys.v;
  std::vector<Eigen::Index> rows;
  std::vector<double> vals;
  for (Eigen::Index k = 0; k < m; ++k) {
    rows.clear();
    vals.clear();
    for (Eigen::SparseMatrix<double>::InnerIterator it(sys.E, k); it; ++it) {
      rows.push_back(it.row());
      vals.push_back(it.value());
    }
    if (rows.empty()) continue;
    const double inv_c = 1.0 / sys.C[k];
    const double wk = sys.w[k] * inv_c;
    for (std::size_t a = 0; a < rows.size(); ++a) {
      rhs[rows[a]] -= vals[a] * wk;
      const double va = vals[a] * inv_c;
      for (std::size_t b = 0; b < rows.size(); ++b) s(rows[a], rows[b]) -= va * vals[b];
    }
  }

  Eigen::VectorXd dx = Eigen::VectorXd::Zero(n);
  if (n > 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite();
    dx = llt.solve(rhs);
    if (!dx.allFinite()) throw NotPositiveDefinite();
  }
  Eigen::VectorXd dy = sys.w;
  if (n > 0) dy.noalias() -= sys.E.transpose() * dx;
  dy.array() /= sys.C.array();
  return {std::move(dx), std::move(dy)};
}

}  // namespace dspo
