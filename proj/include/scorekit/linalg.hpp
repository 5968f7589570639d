#pragma once

// Dense symmetric eigensolver, SPD solve, matrix-free conjugate gradient,
// and spectral filtering.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "scorekit/errors.hpp"
#include "scorekit/types.hpp"

namespace scorekit {

/// Eigenpairs sorted by descending eigenvalue; columns of `vectors` are orthonormal.
struct EigenSystem {
  Vector values;
  Matrix vectors;
};

/// Anything that can apply a symmetric operator to a vector.
template <class Op>
concept LinearOperator = requires(const Op& op, const Vector& x, Vector& y) {
  { op.size() } -> std::convertible_to<Index>;
  op.apply(x, y);
};

struct CGReport {
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
};

/// A + shift * I for an operator A.
template <LinearOperator Op>
class ShiftedOperator {
 public:
  ShiftedOperator(const Op& base, double shift) : base_(base), shift_(shift) {}
  Index size() const { return base_.size(); }
  void apply(const Vector& x, Vector& y) const {
    base_.apply(x, y);
    y += shift_ * x;
  }

 private:
  const Op& base_;
  double shift_;
};

/// Wraps a dense matrix as a LinearOperator.
class DenseOperator {
 public:
  explicit DenseOperator(const Matrix& a) : a_(a) {}
  Index size() const { return a_.rows(); }
  void apply(const Vector& x, Vector& y) const { y.noalias() = a_ * x; }

 private:
  const Matrix& a_;
};

namespace detail {

inline double symmetry_defect(const Matrix& k) {
  const double scale = std::max(k.cwiseAbs().maxCoeff(), 1e-300);
  return (k - k.transpose()).cwiseAbs().maxCoeff() / scale;
}

}  // namespace detail

inline EigenSystem sym_eig(const Matrix& k) {
  if (k.rows() != k.cols()) throw ContractViolation("sym_eig: matrix is not square");
  if (k.size() > 0 && detail::symmetry_defect(k) > 1e-10) {
    throw ContractViolation("sym_eig: matrix is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> solver(k);
  if (solver.info() != Eigen::Success) throw NumericError("sym_eig: eigensolver did not converge");
  const Vector& asc = solver.eigenvalues();
  std::vector<Index> order(static_cast<std::size_t>(asc.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return asc(a) > asc(b); });
  EigenSystem out;
  out.values.resize(asc.size());
  out.vectors.resize(k.rows(), asc.size());
  for (std::size_t j = 0; j < order.size(); ++j) {
    out.values(static_cast<Index>(j)) = asc(order[j]);
    out.vectors.col(static_cast<Index>(j)) = solver.eigenvectors().col(order[j]);
  }
  return out;
}

/// Solves A x = b for symmetric positive definite A by Cholesky with one
/// refinement step. Throws SolverError when A is not numerically SPD or its
/// reciprocal condition estimate is below 1e-14.
inline Vector solve_spd(const Matrix& a, const Vector& b) {
  if (a.rows() != a.cols() || a.rows() != b.size()) throw InputError("solve_spd: dimension mismatch");
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw SolverError("solve_spd: matrix is not positive definite");
  const double rcond = llt.rcond();
  if (!(rcond > 1e-14)) {
    throw SolverError("solve_spd: matrix is numerically singular (condition estimate " + std::to_string(1.0 / rcond) +
                      ")");
  }
  Vector x = llt.solve(b);
  const Vector r = b - a * x;
  x += llt.solve(r);
  if (!x.allFinite()) throw SolverError("solve_spd: non-finite solution");
  return x;
}

/// Plain conjugate gradient with the stopping rule |b - A x| <= tol |b|.
template <LinearOperator Op>
std::pair<Vector, CGReport> conjugate_gradient(const Op& op, const Vector& b, double tol, int max_iter) {
  if (!(tol > 0.0)) throw InputError("conjugate_gradient: tolerance must be positive");
  if (b.size() != op.size()) throw InputError("conjugate_gradient: right-hand side has wrong length");
  CGReport report;
  Vector x = Vector::Zero(b.size());
  const double b_norm = b.norm();
  if (b_norm == 0.0) {
    report.converged = true;
    return {x, report};
  }
  Vector r = b;
  Vector p = r;
  Vector ap(b.size());
  double rr = r.squaredNorm();
  for (int it = 0; it < max_iter; ++it) {
    op.apply(p, ap);
    if (!ap.allFinite()) throw NumericError("conjugate_gradient: operator produced non-finite values");
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) throw NumericError("conjugate_gradient: operator is not positive definite");
    const double alpha = rr / pap;
    x += alpha * p;
    r -= alpha * ap;
    const double rr_new = r.squaredNorm();
    report.iterations = it + 1;
    report.relative_residual = std::sqrt(rr_new) / b_norm;
    if (report.relative_residual <= tol) {
      report.converged = true;
      return {x, report};
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return {x, report};
}

/// sum_j g(s_j) (u_j . v) u_j over eigenpairs with s_j >= min_eigenvalue.
/// Pass -infinity to include the full spectrum.
template <class Filter>
Vector apply_spectral_filter(const EigenSystem& eig, Filter&& g, const Vector& v,
                             double min_eigenvalue = -std::numeric_limits<double>::infinity()) {
  if (v.size() != eig.vectors.rows()) throw InputError("apply_spectral_filter: vector has wrong length");
  Vector coeff = eig.vectors.transpose() * v;
  for (Index j = 0; j < coeff.size(); ++j) {
    const double s = eig.values(j);
    if (s < min_eigenvalue) {
      coeff(j) = 0.0;
      continue;
    }
    const double gj = g(s);
    if (!std::isfinite(gj)) throw NumericError("apply_spectral_filter: filter is not finite at an eigenvalue");
    coeff(j) *= gj;
  }
  return eig.vectors * coeff;
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration, stopping
/// when successive Rayleigh quotients agree to `rel_tol`.
template <LinearOperator Op>
double power_iteration(const Op& op, double rel_tol = 1e-3, int max_iter = 1000) {
  const Index n = op.size();
  // Deterministic, non-degenerate start vector.
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = 1.0 + 0.5 * std::sin(1.0 + static_cast<double>(i));
  v.normalize();
  Vector w(n);
  double estimate = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    op.apply(v, w);
    if (!w.allFinite()) throw NumericError("power_iteration: operator produced non-finite values");
    const double next = v.dot(w);
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    v = w / norm;
    if (it > 0 && std::abs(next - estimate) <= rel_tol * std::abs(next)) return next;
    estimate = next;
  }
  return estimate;
}

}  // namespace scorekit
