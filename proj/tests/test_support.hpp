#pragma once

// Test-only oracles: direct kernel formulas, finite differences and random
// instance generators. Nothing here calls into the estimator code paths it
// is used to check.

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Eigenvalues>

#include "scorekit/kernels.hpp"

namespace scorekit::oracle {

inline RowMatrix random_points(Index m, Index d, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  RowMatrix x(m, d);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

inline Vector random_vector(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

// k(x, y) written out from the kernel definitions.
inline double direct_kernel(KernelFamily family, double bandwidth, const Vector& x, const Vector& y) {
  const double u = (x - y).squaredNorm();
  if (family == KernelFamily::IMQ) return 1.0 / std::sqrt(1.0 + u / (bandwidth * bandwidth));
  return std::exp(-u / (2.0 * bandwidth * bandwidth));
}

// d^2 k / dx_i dy_j by central differences.
inline double fd_mixed_partial(KernelFamily family, double bandwidth, const Vector& x, const Vector& y, Index i,
                               Index j, double h) {
  auto k = [&](double dx, double dy) {
    Vector xs = x;
    Vector ys = y;
    xs(i) += dx;
    ys(j) += dy;
    return direct_kernel(family, bandwidth, xs, ys);
  };
  return (k(h, h) - k(h, -h) - k(-h, h) + k(-h, -h)) / (4.0 * h * h);
}

// d^n phi / du^n at u by central differences of the closed-form profile.
inline double fd_profile_derivative(KernelFamily family, double bandwidth, double u, int order, double h) {
  auto phi = [&](double v) {
    if (family == KernelFamily::IMQ) return 1.0 / std::sqrt(1.0 + v / (bandwidth * bandwidth));
    return std::exp(-v / (2.0 * bandwidth * bandwidth));
  };
  switch (order) {
    case 1: return (phi(u + h) - phi(u - h)) / (2 * h);
    case 2: return (phi(u + h) - 2 * phi(u) + phi(u - h)) / (h * h);
    default: return (phi(u + 2 * h) - 2 * phi(u + h) + 2 * phi(u - h) - phi(u - 2 * h)) / (2 * h * h * h);
  }
}

// zeta(q) = (1/M) sum_m div_x K(x, q)|_{x_m}, with the divergence of each
// column taken by central differences of eval_matrix_kernel.
inline Vector fd_zeta(const MatrixKernelSpec& spec, const RowMatrix& x, const Vector& q, double h) {
  const Index d = x.cols();
  Vector out = Vector::Zero(d);
  for (Index m = 0; m < x.rows(); ++m) {
    for (Index j = 0; j < d; ++j) {
      Vector xp = x.row(m).transpose();
      Vector xm = xp;
      xp(j) += h;
      xm(j) -= h;
      const Matrix kp = eval_matrix_kernel(spec, xp, q);
      const Matrix km = eval_matrix_kernel(spec, xm, q);
      // column i divergence: sum_j d/dx_j K_{j i}
      out += ((kp.row(j) - km.row(j)) / (2 * h)).transpose();
    }
  }
  return out / static_cast<double>(x.rows());
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max(b.norm(), 1e-300);
  return (a - b).norm() / scale;
}

// Md x Md block Gram built pair by pair.
inline Matrix dense_gram(const MatrixKernelSpec& spec, const RowMatrix& x, const RowMatrix& y) {
  const Index d = x.cols();
  Matrix k(x.rows() * d, y.rows() * d);
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < y.rows(); ++j) k.block(i * d, j * d, d, d) = eval_matrix_kernel(spec, x.row(i), y.row(j));
  return k;
}

inline Vector stack(const RowMatrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

struct Instance {
  MatrixKernelSpec spec;
  SampleMatrix samples;
  RowMatrix queries;
};

inline Instance random_instance(int i, Index max_m, Index max_d, KernelKind kind) {
  std::mt19937_64 rng(1000 + i);
  const Index m = 2 + static_cast<Index>(rng() % static_cast<std::uint64_t>(max_m - 1));
  const Index d = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(max_d));
  const double bw = 0.7 + 0.1 * static_cast<double>(rng() % 10);
  const KernelFamily fam = (rng() & 1) ? KernelFamily::IMQ : KernelFamily::Gaussian;
  return {{kind, ScalarRadialKernel(fam, bw)}, SampleMatrix(random_points(m, d, 2000 + i)),
          random_points(5, d, 3000 + i)};
}

inline double condition_number(const Matrix& k) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(k);
  return es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff();
}

// Instances whose Gram matrix is numerically invertible, drawn by rejection.
inline Instance invertible_instance(int i, Index max_m, Index max_d, KernelKind kind, double max_cond = 1e6) {
  for (int k = 0;; ++k) {
    Instance inst = random_instance(i * 7919 + k, max_m, max_d, kind);
    const Matrix g = dense_gram(inst.spec, inst.samples.data(), inst.samples.data());
    const double c = condition_number(g);
    if (c > 0.0 && c < max_cond) return inst;
  }
}

inline Vector symmetric_eigenvalues(const Matrix& k) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(k);
  return es.eigenvalues();
}

// Coordinatewise form built from the M x M scalar Gram:
//   s_i(x) = -k(x, X) (sum_{l_j / M >= t} w_j w_j^T / l_j^2) r_i,   r_i(x_l) = sum_m d/dx_i k(x_m, x_l).
inline RowMatrix cutoff_oracle(const ScalarRadialKernel& k, const RowMatrix& x, const RowMatrix& q, double threshold) {
  const Index m = x.rows();
  const Index d = x.cols();
  Matrix g(m, m);
  for (Index a = 0; a < m; ++a)
    for (Index b = 0; b < m; ++b)
      g(a, b) = direct_kernel(k.family(), k.bandwidth(), x.row(a).transpose(), x.row(b).transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(g);
  Matrix proj = Matrix::Zero(m, m);
  for (Index j = 0; j < m; ++j) {
    const double l = es.eigenvalues()(j);
    if (l / static_cast<double>(m) >= threshold) proj += es.eigenvectors().col(j) * es.eigenvectors().col(j).transpose() / (l * l);
  }
  Matrix r = Matrix::Zero(m, d);
  for (Index l = 0; l < m; ++l)
    for (Index mm = 0; mm < m; ++mm) {
      const RowVector diff = x.row(mm) - x.row(l);
      r.row(l) += 2.0 * k.derivs(diff.squaredNorm()).d1 * diff;
    }
  Matrix kq(q.rows(), m);
  for (Index a = 0; a < q.rows(); ++a)
    for (Index b = 0; b < m; ++b)
      kq(a, b) = direct_kernel(k.family(), k.bandwidth(), q.row(a).transpose(), x.row(b).transpose());
  return -(kq * proj * r);
}

// Central-difference Jacobian of a score field; column k is d s / d x_k.
template <class Field>
Matrix fd_jacobian(const Field& est, const RowVector& x, double h) {
  const Index d = x.size();
  Matrix j(d, d);
  for (Index k = 0; k < d; ++k) {
    RowMatrix xp = x, xm = x;
    xp(0, k) += h;
    xm(0, k) -= h;
    j.col(k) = ((est.predict(xp) - est.predict(xm)) / (2 * h)).transpose();
  }
  return j;
}

}  // namespace scorekit::oracle
