#pragma once

// Scalar radial kernels, the diagonal and curl-free matrix-valued kernels
// built from them, Gram matrices, and the divergence field used by every
// score estimator.

#include <cmath>
#include <cstddef>
#include <limits>
#include <new>
#include <string>
#include <utility>

#include "scorekit/errors.hpp"
#include "scorekit/types.hpp"

namespace scorekit {

enum class KernelFamily { IMQ, Gaussian };

enum class KernelKind { Diagonal, CurlFree };

inline const char* to_string(KernelFamily f) { return f == KernelFamily::IMQ ? "imq" : "gaussian"; }
inline const char* to_string(KernelKind k) { return k == KernelKind::Diagonal ? "diagonal" : "curlfree"; }

/// Value and first three derivatives of a radial profile phi(u), u = |x - y|^2.
struct RadialDerivs {
  double value;
  double d1;
  double d2;
  double d3;
};

/// A radial kernel k(x, y) = phi(|x - y|^2) normalized so that phi(0) = 1.
///
///   IMQ:      phi(u) = (1 + u / s^2)^(-1/2)
///   Gaussian: phi(u) = exp(-u / (2 s^2))
class ScalarRadialKernel {
 public:
  ScalarRadialKernel(KernelFamily family, double bandwidth) : family_(family), bandwidth_(bandwidth) {
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
      throw InputError("kernel bandwidth must be positive and finite, got " + std::to_string(bandwidth));
    }
    inv_s2_ = 1.0 / (bandwidth * bandwidth);
  }

  KernelFamily family() const { return family_; }
  double bandwidth() const { return bandwidth_; }

  // Unchecked; u must be >= 0.
  RadialDerivs derivs(double u) const {
    const double a = inv_s2_;
    if (family_ == KernelFamily::IMQ) {
      const double base = 1.0 / (1.0 + u * a);  // (1 + u/s^2)^-1
      const double v = std::sqrt(base);
      const double v3 = v * base;
      const double v5 = v3 * base;
      const double v7 = v5 * base;
      return {v, -0.5 * a * v3, 0.75 * a * a * v5, -1.875 * a * a * a * v7};
    }
    const double v = std::exp(-0.5 * u * a);
    const double h = -0.5 * a;
    return {v, h * v, h * h * v, h * h * h * v};
  }

  double value(double u) const { return derivs(u).value; }

  bool operator==(const ScalarRadialKernel& o) const {
    return family_ == o.family_ && bandwidth_ == o.bandwidth_;
  }

 private:
  KernelFamily family_;
  double bandwidth_;
  double inv_s2_;
};

/// Checked evaluation of (phi, phi', phi'', phi''') at u.
inline RadialDerivs scalar_derivs(const ScalarRadialKernel& kernel, double u) {
  if (!std::isfinite(u) || u < 0.0) {
    throw InputError("radial argument must be finite and non-negative, got " + std::to_string(u));
  }
  return kernel.derivs(u);
}

struct MatrixKernelSpec {
  KernelKind kind;
  ScalarRadialKernel scalar;

  bool operator==(const MatrixKernelSpec&) const = default;
};

/// M x d sample set, one sample per row.
class SampleMatrix {
 public:
  explicit SampleMatrix(RowMatrix data) : data_(std::move(data)) {
    if (data_.rows() < 1 || data_.cols() < 1) {
      throw InputError("sample matrix must have at least one row and one column");
    }
    if (!data_.allFinite()) throw InputError("sample matrix contains non-finite entries");
  }

  Index size() const { return data_.rows(); }
  Index dim() const { return data_.cols(); }
  const RowMatrix& data() const { return data_; }
  auto row(Index m) const { return data_.row(m); }

 private:
  RowMatrix data_;
};

namespace detail {

inline void require_same_dim(Index a, Index b, const char* what) {
  if (a != b) {
    throw InputError(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                     std::to_string(b) + ")");
  }
}

// u(p, l) = |a_p - b_l|^2 from explicit differences; coincident points give exactly 0.
inline Matrix squared_distances(const RowMatrix& a, const RowMatrix& b) {
  Matrix u(a.rows(), b.rows());
  for (Index l = 0; l < b.rows(); ++l) {
    for (Index p = 0; p < a.rows(); ++p) u(p, l) = (a.row(p) - b.row(l)).squaredNorm();
  }
  return u;
}

// Tables over point pairs needed to apply the kernel to coefficient vectors.
// Diagonal: first = phi. CurlFree: first = phi', second = phi''.
struct ExpansionTables {
  Matrix first;
  Matrix second;
};

inline ExpansionTables expansion_tables(const MatrixKernelSpec& spec, const Matrix& u) {
  ExpansionTables t;
  t.first.resize(u.rows(), u.cols());
  if (spec.kind == KernelKind::CurlFree) t.second.resize(u.rows(), u.cols());
  for (Index j = 0; j < u.cols(); ++j) {
    for (Index i = 0; i < u.rows(); ++i) {
      const RadialDerivs r = spec.scalar.derivs(u(i, j));
      if (spec.kind == KernelKind::Diagonal) {
        t.first(i, j) = r.value;
      } else {
        t.first(i, j) = r.d1;
        t.second(i, j) = r.d2;
      }
    }
  }
  return t;
}

// out_p = sum_l K(p_p, z_l) c_l for every row p of `points`.
// Curl-free blocks are -4 phi'' r r^T - 2 phi' I with r = p - z, so
//   out_p = (sum_l alpha_pl) p - sum_l alpha_pl z_l - 2 sum_l phi'_pl c_l,
//   alpha_pl = -4 phi''_pl (p.c_l - z_l.c_l),
// which is three M x M x d products and never forms a d x d block.
inline RowMatrix apply_tables(const MatrixKernelSpec& spec, const ExpansionTables& t, const RowMatrix& points,
                              const RowMatrix& centers, const RowMatrix& coeffs) {
  if (spec.kind == KernelKind::Diagonal) return t.first * coeffs;
  const Matrix pc = points * coeffs.transpose();
  const Vector zc = centers.cwiseProduct(coeffs).rowwise().sum();
  const Matrix alpha = -4.0 * t.second.cwiseProduct(pc.rowwise() - zc.transpose());
  RowMatrix out = alpha.rowwise().sum().asDiagonal() * points;
  out.noalias() -= alpha * centers;
  out.noalias() -= 2.0 * (t.first * coeffs);
  return out;
}

// Weight w such that div_x K(x, y) = w(u) (x - y).
inline double divergence_weight(const MatrixKernelSpec& spec, Index dim, double u) {
  const RadialDerivs r = spec.scalar.derivs(u);
  if (spec.kind == KernelKind::Diagonal) return 2.0 * r.d1;
  return -4.0 * (static_cast<double>(dim + 2) * r.d2 + 2.0 * u * r.d3);
}

inline constexpr Index kQueryBlock = 512;

}  // namespace detail

/// K(x, y) as a d x d matrix.
template <class DX, class DY>
Matrix eval_matrix_kernel(const MatrixKernelSpec& spec, const Eigen::MatrixBase<DX>& x,
                          const Eigen::MatrixBase<DY>& y) {
  detail::require_same_dim(x.size(), y.size(), "eval_matrix_kernel");
  const Index d = x.size();
  Vector r(d);
  for (Index i = 0; i < d; ++i) r(i) = x(i) - y(i);
  const double u = r.squaredNorm();
  const RadialDerivs k = spec.scalar.derivs(u);
  if (spec.kind == KernelKind::Diagonal) return k.value * Matrix::Identity(d, d);
  Matrix out = (-4.0 * k.d2) * (r * r.transpose());
  out.diagonal().array() -= 2.0 * k.d1;
  return out;
}

/// K_cf(x, y) a in O(d): -4 phi''(u) (r.a) r - 2 phi'(u) a.
template <class DX, class DY, class DA>
Vector curlfree_matvec(const MatrixKernelSpec& spec, const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y,
                       const Eigen::MatrixBase<DA>& a) {
  if (spec.kind != KernelKind::CurlFree) throw ContractViolation("curlfree_matvec requires a curl-free kernel");
  detail::require_same_dim(x.size(), y.size(), "curlfree_matvec");
  detail::require_same_dim(x.size(), a.size(), "curlfree_matvec");
  const Index d = x.size();
  Vector r(d);
  for (Index i = 0; i < d; ++i) r(i) = x(i) - y(i);
  const RadialDerivs k = spec.scalar.derivs(r.squaredNorm());
  double ra = 0.0;
  for (Index i = 0; i < d; ++i) ra += r(i) * a(i);
  Vector out(d);
  for (Index i = 0; i < d; ++i) out(i) = -4.0 * k.d2 * ra * r(i) - 2.0 * k.d1 * a(i);
  return out;
}

/// zeta(q) = (1/M) sum_m div_x K(x, q)|_{x = x_m} for every row q of `queries`.
inline RowMatrix zeta_rows(const MatrixKernelSpec& spec, const SampleMatrix& samples, const RowMatrix& queries) {
  detail::require_same_dim(queries.cols(), samples.dim(), "zeta");
  const RowMatrix& x = samples.data();
  const Index n_samples = samples.size();
  const Index d = samples.dim();
  RowMatrix out(queries.rows(), d);
  for (Index start = 0; start < queries.rows(); start += detail::kQueryBlock) {
    const Index len = std::min(detail::kQueryBlock, queries.rows() - start);
    const RowMatrix q = queries.middleRows(start, len);
    Matrix w = detail::squared_distances(q, x);
    for (Index j = 0; j < w.cols(); ++j) {
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = detail::divergence_weight(spec, d, w(i, j));
    }
    for (Index i = 0; i < len; ++i) {
      const RowMatrix offsets = x.rowwise() - q.row(i);
      out.row(start + i) = (w.row(i) * offsets) / static_cast<double>(n_samples);
    }
  }
  return out;
}

template <class DQ>
Vector zeta(const MatrixKernelSpec& spec, const SampleMatrix& samples, const Eigen::MatrixBase<DQ>& query) {
  detail::require_same_dim(query.size(), samples.dim(), "zeta");
  RowMatrix q(1, query.size());
  for (Index i = 0; i < query.size(); ++i) q(0, i) = query(i);
  return zeta_rows(spec, samples, q).row(0).transpose();
}

/// Stacked h = (zeta(x_1), ..., zeta(x_M)), index m * d + i.
inline Vector h_vector(const MatrixKernelSpec& spec, const SampleMatrix& samples) {
  const RowMatrix z = zeta_rows(spec, samples, samples.data());
  return Eigen::Map<const Vector>(z.data(), z.size());
}

/// sum_l K(q, z_l) c_l for every query row; `coeffs` stacks c_l as index l * d + i.
inline RowMatrix kernel_expansion(const MatrixKernelSpec& spec, const RowMatrix& centers, const Vector& coeffs,
                                  const RowMatrix& queries) {
  detail::require_same_dim(queries.cols(), centers.cols(), "kernel_expansion");
  detail::require_same_dim(coeffs.size(), centers.size(), "kernel_expansion coefficients");
  const Eigen::Map<const RowMatrix> c(coeffs.data(), centers.rows(), centers.cols());
  const RowMatrix cm = c;
  RowMatrix out(queries.rows(), queries.cols());
  for (Index start = 0; start < queries.rows(); start += detail::kQueryBlock) {
    const Index len = std::min(detail::kQueryBlock, queries.rows() - start);
    const RowMatrix q = queries.middleRows(start, len);
    const auto tables = detail::expansion_tables(spec, detail::squared_distances(q, centers));
    out.middleRows(start, len) = detail::apply_tables(spec, tables, q, centers, cm);
  }
  return out;
}

enum class GramMode { Dense, Implicit };

inline constexpr std::size_t kDefaultDenseBudgetBytes = std::size_t{8} << 30;

/// The Md x Md block Gram matrix K_{(m,i),(l,j)} = K(x_m, x_l)_{ij}.
///
/// Dense mode materializes K. Implicit mode keeps the samples plus M x M
/// tables of radial derivatives and only supports matvec.
class GramMatrix {
 public:
  GramMatrix(const MatrixKernelSpec& spec, const SampleMatrix& samples, GramMode mode,
             std::size_t max_dense_bytes = kDefaultDenseBudgetBytes)
      : spec_(spec), points_(samples.data()), mode_(mode) {
    const Index n = samples.size() * samples.dim();
    if (mode == GramMode::Dense) {
      const double bytes = static_cast<double>(n) * static_cast<double>(n) * sizeof(double);
      if (bytes > static_cast<double>(max_dense_bytes)) {
        throw ResourceError("dense Gram matrix of size " + std::to_string(n) + " needs " +
                            std::to_string(bytes / (1 << 20)) + " MiB, over the budget");
      }
      try {
        assemble_dense(samples);
      } catch (const std::bad_alloc&) {
        throw ResourceError("out of memory assembling dense Gram matrix of size " + std::to_string(n));
      }
    } else {
      tables_ = detail::expansion_tables(spec_, detail::squared_distances(points_, points_));
    }
  }

  GramMode mode() const { return mode_; }
  const MatrixKernelSpec& kernel() const { return spec_; }
  Index num_samples() const { return points_.rows(); }
  Index dim() const { return points_.cols(); }
  Index size() const { return points_.rows() * points_.cols(); }

  const Matrix& dense() const {
    if (mode_ != GramMode::Dense) throw ContractViolation("Gram matrix was assembled in implicit mode");
    return dense_;
  }

  void apply(const Vector& b, Vector& out) const {
    if (b.size() != size()) {
      throw InputError("gram_matvec: vector length " + std::to_string(b.size()) + " does not match " +
                       std::to_string(size()));
    }
    if (mode_ == GramMode::Dense) {
      out.noalias() = dense_ * b;
      return;
    }
    const Eigen::Map<const RowMatrix> bm(b.data(), points_.rows(), points_.cols());
    const RowMatrix res = detail::apply_tables(spec_, tables_, points_, points_, bm);
    out = Eigen::Map<const Vector>(res.data(), res.size());
  }

  /// Bytes held by the representation (matrix or tables plus stored samples).
  std::size_t memory_bytes() const {
    const auto doubles = static_cast<std::size_t>(points_.size() + dense_.size() + tables_.first.size() +
                                                  tables_.second.size());
    return doubles * sizeof(double);
  }

 private:
  void assemble_dense(const SampleMatrix& samples) {
    const Index m = samples.size();
    const Index d = samples.dim();
    dense_.resize(m * d, m * d);
    for (Index a = 0; a < m; ++a) {
      for (Index b = a; b < m; ++b) {
        const Matrix block = eval_matrix_kernel(spec_, samples.row(a), samples.row(b));
        dense_.block(a * d, b * d, d, d) = block;
        if (b != a) dense_.block(b * d, a * d, d, d) = block.transpose();
      }
    }
  }

  MatrixKernelSpec spec_;
  RowMatrix points_;
  GramMode mode_;
  Matrix dense_;
  detail::ExpansionTables tables_;
};

inline GramMatrix assemble_gram(const MatrixKernelSpec& spec, const SampleMatrix& samples, GramMode mode,
                                std::size_t max_dense_bytes = kDefaultDenseBudgetBytes) {
  return GramMatrix(spec, samples, mode, max_dense_bytes);
}

inline Vector gram_matvec(const GramMatrix& gram, const Vector& b) {
  Vector out(gram.size());
  gram.apply(b, out);
  return out;
}

/// Scalar Gram k(X, X); for diagonal kernels K = k(X, X) kron I_d.
inline Matrix scalar_gram(const ScalarRadialKernel& kernel, const RowMatrix& points) {
  Matrix g = detail::squared_distances(points, points);
  g = g.unaryExpr([&](double u) { return kernel.value(u); });
  return g;
}

}  // namespace scorekit
