#pragma once

// Score estimators of the form s(x) = -g(L) zeta(x) for the Tikhonov,
// truncated Tikhonov, spectral cut-off, Landweber and nu-method filters,
// plus the Nystrom restriction.
//
// Every fitted estimator predicts
//
//     s(x) = a * zeta(x) + sum_l K(x, z_l) c_l
//
// where z_l are the expansion centers (the samples, or a Nystrom subset).

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "scorekit/errors.hpp"
#include "scorekit/kernels.hpp"
#include "scorekit/linalg.hpp"
#include "scorekit/types.hpp"

namespace scorekit {

struct Tikhonov {
  double lambda;
};

/// Tikhonov restricted to the non-zero spectrum: g(s) = 1 / (s + lambda) for s > 0.
struct TruncatedTikhonov {
  double lambda;
};

/// g(s) = 1 / s for s >= threshold. Set either `threshold` or `rank`
/// (rank J uses the J-th largest eigenvalue of K / M as the threshold).
struct SpectralCutoff {
  double threshold = 0.0;
  Index rank = 0;
};

/// `step` = 0 selects 0.9 / sigma_max(K / M).
struct Landweber {
  double step = 0.0;
  int iterations = 1;
};

struct NuMethod {
  double nu = 1.0;
  int iterations = 1;
};

/// Arbitrary filter g applied to the non-zero spectrum (g(0) treated as 0).
struct CustomFilter {
  std::string name;
  std::function<double(double)> g;
};

using RegularizerSpec = std::variant<Tikhonov, TruncatedTikhonov, SpectralCutoff, Landweber, NuMethod, CustomFilter>;

inline std::string scheme_name(const RegularizerSpec& s) {
  switch (s.index()) {
    case 0: return "tikhonov";
    case 1: return "truncated_tikhonov";
    case 2: return "spectral_cutoff";
    case 3: return "landweber";
    case 4: return "nu_method";
    default: return "custom:" + std::get<CustomFilter>(s).name;
  }
}

/// t = floor(1 / lambda).
inline int landweber_iterations(double lambda) {
  if (!(lambda > 0.0)) throw InputError("lambda must be positive");
  return std::max(1, static_cast<int>(std::floor(1.0 / lambda)));
}

/// t = floor(lambda^(-1/2)).
inline int nu_method_iterations(double lambda) {
  if (!(lambda > 0.0)) throw InputError("lambda must be positive");
  return std::max(1, static_cast<int>(std::floor(1.0 / std::sqrt(lambda))));
}

struct NuCoefficients {
  double u;
  double omega;
};

inline NuCoefficients nu_coefficients(int t, double nu) {
  const double tt = t;
  const double u = (tt - 1.0) * (2.0 * tt - 3.0) * (2.0 * tt + 2.0 * nu - 1.0) /
                   ((tt + 2.0 * nu - 1.0) * (2.0 * tt + 4.0 * nu - 1.0) * (2.0 * tt + 2.0 * nu - 3.0));
  const double omega = 4.0 * (2.0 * tt + 2.0 * nu - 1.0) * (tt + nu - 1.0) /
                       ((tt + 2.0 * nu - 1.0) * (2.0 * tt + 4.0 * nu - 1.0));
  return {u, omega};
}

/// Eigenvalues below this fraction of the largest are treated as zero.
inline constexpr double kRankEpsilon = 1e-10;

struct FitDiagnostics {
  std::optional<CGReport> cg;
  std::vector<std::string> warnings;
  double step = 0.0;              // Landweber step
  double sigma_max = 0.0;         // estimate of the top eigenvalue of K / M, when computed
  double threshold = 0.0;         // spectral cut-off threshold actually used
  Index retained = 0;             // eigenpairs kept by a spectral filter
};

enum class TikhonovSolver { Direct, ConjugateGradient };

struct FitOptions {
  /// Gram representation; unset picks dense for eigen-based schemes and
  /// implicit for iterative ones.
  std::optional<GramMode> gram_mode;
  /// Use k(X, X) kron I_d for diagonal kernels instead of the full Md x Md matrix.
  bool exploit_kronecker = true;
  std::size_t max_dense_bytes = kDefaultDenseBudgetBytes;
  TikhonovSolver tikhonov_solver = TikhonovSolver::Direct;
  double cg_tolerance = 1e-4;
  int cg_max_iterations = 40;
};

class FittedScoreEstimator {
 public:
  FittedScoreEstimator(MatrixKernelSpec kernel, SampleMatrix samples, RowMatrix centers, Vector coeffs, double offset,
                       RegularizerSpec scheme, std::vector<Index> subset = {}, FitDiagnostics diagnostics = {})
      : kernel_(std::move(kernel)),
        samples_(std::move(samples)),
        centers_(std::move(centers)),
        coeffs_(std::move(coeffs)),
        offset_(offset),
        scheme_(std::move(scheme)),
        subset_(std::move(subset)),
        diagnostics_(std::move(diagnostics)) {
    if (centers_.cols() != samples_.dim()) throw InputError("estimator centers have wrong dimension");
    if (coeffs_.size() != centers_.size()) throw InputError("estimator coefficient vector has wrong length");
    if (!coeffs_.allFinite() || !std::isfinite(offset_)) throw NumericError("estimator state is not finite");
  }

  const MatrixKernelSpec& kernel() const { return kernel_; }
  const SampleMatrix& samples() const { return samples_; }
  const RowMatrix& centers() const { return centers_; }
  const Vector& coefficients() const { return coeffs_; }
  double offset() const { return offset_; }
  const RegularizerSpec& scheme() const { return scheme_; }
  const std::vector<Index>& subset() const { return subset_; }
  const FitDiagnostics& diagnostics() const { return diagnostics_; }
  Index dim() const { return samples_.dim(); }

  /// One score estimate per query row.
  RowMatrix predict(const RowMatrix& queries) const {
    detail::require_same_dim(queries.cols(), dim(), "predict");
    RowMatrix out = kernel_expansion(kernel_, centers_, coeffs_, queries);
    if (offset_ != 0.0) out += offset_ * zeta_rows(kernel_, samples_, queries);
    if (!out.allFinite()) throw NumericError("predict produced non-finite scores");
    return out;
  }

  /// Unnormalized log density (curl-free kernels only), zero at the first sample.
  Vector log_density(const RowMatrix& queries) const {
    if (kernel_.kind != KernelKind::CurlFree) {
      throw ContractViolation("log density recovery requires a curl-free kernel");
    }
    detail::require_same_dim(queries.cols(), dim(), "log_density");
    const RowMatrix anchor = samples_.data().topRows(1);
    const double gauge = raw_potential(anchor)(0);
    return raw_potential(queries).array() - gauge;
  }

 private:
  // Curl-free blocks are -Hess phi(|x - y|^2), so
  //   K(q, z) c = grad_q [ -2 phi'(u) (q - z).c ]
  //   div_x K(x, q)|_{x = x_m} = grad_q [ 2 d phi'(u) + 4 u phi''(u) ],  u = |q - x_m|^2.
  Vector raw_potential(const RowMatrix& queries) const {
    const Index d = dim();
    const Eigen::Map<const RowMatrix> c(coeffs_.data(), centers_.rows(), d);
    Vector out(queries.rows());
    for (Index q = 0; q < queries.rows(); ++q) {
      double kernel_part = 0.0;
      for (Index l = 0; l < centers_.rows(); ++l) {
        const RowVector r = queries.row(q) - centers_.row(l);
        const RadialDerivs k = kernel_.scalar.derivs(r.squaredNorm());
        kernel_part += -2.0 * k.d1 * r.dot(c.row(l));
      }
      double zeta_part = 0.0;
      if (offset_ != 0.0) {
        for (Index m = 0; m < samples_.size(); ++m) {
          const double u = (queries.row(q) - samples_.row(m)).squaredNorm();
          const RadialDerivs k = kernel_.scalar.derivs(u);
          zeta_part += 2.0 * static_cast<double>(d) * k.d1 + 4.0 * u * k.d2;
        }
        zeta_part *= offset_ / static_cast<double>(samples_.size());
      }
      out(q) = kernel_part + zeta_part;
    }
    return out;
  }

  MatrixKernelSpec kernel_;
  SampleMatrix samples_;
  RowMatrix centers_;
  Vector coeffs_;
  double offset_;
  RegularizerSpec scheme_;
  std::vector<Index> subset_;
  FitDiagnostics diagnostics_;
};

inline RowMatrix predict(const FittedScoreEstimator& est, const RowMatrix& queries) { return est.predict(queries); }

/// Potential whose gradient is the curl-free estimate, fixed to 0 at the first sample.
template <class DQ>
double recover_log_density(const FittedScoreEstimator& est, const Eigen::MatrixBase<DQ>& query) {
  RowMatrix q(1, query.size());
  for (Index i = 0; i < query.size(); ++i) q(0, i) = query(i);
  return est.log_density(q)(0);
}

/// Kernel tables and zeta at a fixed query set, shared by every estimator
/// with the same kernel and samples whose centers are the samples. Gives
/// the same bits as FittedScoreEstimator::predict.
class PredictionCache {
 public:
  PredictionCache(MatrixKernelSpec spec, SampleMatrix samples, RowMatrix queries)
      : spec_(std::move(spec)), samples_(std::move(samples)), queries_(std::move(queries)) {
    detail::require_same_dim(queries_.cols(), samples_.dim(), "PredictionCache");
    for (Index start = 0; start < queries_.rows(); start += detail::kQueryBlock) {
      const Index len = std::min(detail::kQueryBlock, queries_.rows() - start);
      const RowMatrix q = queries_.middleRows(start, len);
      tables_.push_back(detail::expansion_tables(spec_, detail::squared_distances(q, samples_.data())));
    }
  }

  const RowMatrix& queries() const { return queries_; }

  RowMatrix predict(const FittedScoreEstimator& est) const {
    if (!(est.kernel() == spec_) || est.centers().rows() != samples_.size() ||
        est.centers() != samples_.data() || est.samples().data() != samples_.data()) {
      return est.predict(queries_);
    }
    const Eigen::Map<const RowMatrix> c(est.coefficients().data(), samples_.size(), samples_.dim());
    const RowMatrix cm = c;
    RowMatrix out(queries_.rows(), queries_.cols());
    Index start = 0;
    for (const auto& t : tables_) {
      const Index len = std::min(detail::kQueryBlock, queries_.rows() - start);
      const RowMatrix q = queries_.middleRows(start, len);
      out.middleRows(start, len) = detail::apply_tables(spec_, t, q, samples_.data(), cm);
      start += len;
    }
    if (est.offset() != 0.0) {
      if (!zeta_) zeta_ = zeta_rows(spec_, samples_, queries_);
      out += est.offset() * *zeta_;
    }
    if (!out.allFinite()) throw NumericError("predict produced non-finite scores");
    return out;
  }

 private:
  MatrixKernelSpec spec_;
  SampleMatrix samples_;
  RowMatrix queries_;
  std::vector<detail::ExpansionTables> tables_;
  mutable std::optional<RowMatrix> zeta_;
};

namespace detail {

inline void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw InputError(std::string(what) + " must be positive and finite");
}

inline Vector reshape_rows(const RowMatrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline bool use_kronecker(const MatrixKernelSpec& spec, const FitOptions& opts) {
  return spec.kind == KernelKind::Diagonal && opts.exploit_kronecker;
}

// Spectral data of K / M shared by the eigen-based schemes.
struct Spectrum {
  Vector sigma;     // descending eigenvalues of K / M (Md of them; repeated d times in the Kronecker case)
  EigenSystem eig;  // eigensystem of K (Md x Md) or of k(X, X) (M x M)
  bool kronecker = false;
  Index dim = 1;
};

inline Spectrum spectrum_of(const MatrixKernelSpec& spec, const SampleMatrix& samples, const FitOptions& opts) {
  if (opts.gram_mode == GramMode::Implicit) {
    throw InputError("this regularizer needs a dense eigendecomposition; implicit Gram mode is not supported");
  }
  Spectrum s;
  s.dim = samples.dim();
  const double m = static_cast<double>(samples.size());
  if (use_kronecker(spec, opts)) {
    s.kronecker = true;
    s.eig = sym_eig(scalar_gram(spec.scalar, samples.data()));
    s.sigma.resize(samples.size() * samples.dim());
    for (Index j = 0; j < s.eig.values.size(); ++j) {
      s.sigma.segment(j * s.dim, s.dim).setConstant(s.eig.values(j) / m);
    }
  } else {
    const GramMatrix gram(spec, samples, GramMode::Dense, opts.max_dense_bytes);
    s.eig = sym_eig(gram.dense());
    s.sigma = s.eig.values / m;
  }
  return s;
}

// c = -sum_{sigma_j kept} f(sigma_j) u_j u_j^T h, where f already includes the 1/(M sigma) factor.
template <class F>
Vector filtered_coefficients(const Spectrum& s, const Vector& h, Index n_samples, F&& f, double min_sigma) {
  const double m = static_cast<double>(n_samples);
  if (s.kronecker) {
    const Eigen::Map<const RowMatrix> hm(h.data(), n_samples, s.dim);
    Matrix proj = s.eig.vectors.transpose() * hm;  // M x d
    for (Index j = 0; j < proj.rows(); ++j) {
      const double sigma = s.eig.values(j) / m;
      proj.row(j) *= sigma >= min_sigma ? f(sigma) : 0.0;
    }
    const RowMatrix c = -(s.eig.vectors * proj);
    return reshape_rows(c);
  }
  EigenSystem scaled{s.sigma, s.eig.vectors};
  return -apply_spectral_filter(scaled, f, h, min_sigma);
}

inline double rank_floor(const Spectrum& s) {
  const double top = s.sigma.size() > 0 ? s.sigma(0) : 0.0;
  // Smallest positive double above the relative cut keeps "> eps" semantics with a ">=" test.
  return std::nextafter(kRankEpsilon * top, std::numeric_limits<double>::infinity());
}

inline Index count_at_least(const Vector& sigma, double floor) {
  return static_cast<Index>((sigma.array() >= floor).count());
}

}  // namespace detail

/// Tikhonov: (K + M lambda I) c = h / lambda, a = -1 / lambda, solved directly.
/// Holds the Gram matrix and h so a lambda grid pays for them once.
class TikhonovProblem {
 public:
  TikhonovProblem(const SampleMatrix& samples, const MatrixKernelSpec& spec, const FitOptions& opts = {})
      : samples_(samples), spec_(spec), kronecker_(detail::use_kronecker(spec, opts)), h_(h_vector(spec, samples)) {
    if (kronecker_) {
      gram_ = scalar_gram(spec.scalar, samples.data());
    } else {
      gram_ = GramMatrix(spec, samples, GramMode::Dense, opts.max_dense_bytes).dense();
    }
  }

  FittedScoreEstimator fit(double lambda) const {
    detail::require_positive(lambda, "lambda");
    const Index m = samples_.size();
    const double shift = static_cast<double>(m) * lambda;
    Matrix a = gram_;
    a.diagonal().array() += shift;
    Vector c;
    try {
      if (kronecker_) {
        const Eigen::Map<const RowMatrix> hm(h_.data(), m, samples_.dim());
        Eigen::LLT<Matrix> llt(a);
        if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-14)) {
          throw SolverError("system is numerically singular");
        }
        const RowMatrix cm = llt.solve(Matrix(hm / lambda));
        c = detail::reshape_rows(cm);
      } else {
        c = solve_spd(a, h_ / lambda);
      }
    } catch (const SolverError& e) {
      throw FitError(std::string("Tikhonov fit failed: ") + e.what());
    }
    return {spec_, samples_, samples_.data(), std::move(c), -1.0 / lambda, Tikhonov{lambda}};
  }

 private:
  SampleMatrix samples_;
  MatrixKernelSpec spec_;
  bool kronecker_;
  Vector h_;
  Matrix gram_;
};

inline FittedScoreEstimator fit_tikhonov(const SampleMatrix& samples, const MatrixKernelSpec& spec, double lambda,
                                         const FitOptions& opts = {}) {
  detail::require_positive(lambda, "lambda");
  return TikhonovProblem(samples, spec, opts).fit(lambda);
}

/// Tikhonov with the system solved by conjugate gradient on matvecs only.
/// Non-convergence is reported in diagnostics, not thrown.
inline FittedScoreEstimator fit_tikhonov_cg(const SampleMatrix& samples, const MatrixKernelSpec& spec, double lambda,
                                            double tol = 1e-4, int max_iter = 40, const FitOptions& opts = {}) {
  detail::require_positive(lambda, "lambda");
  const GramMatrix gram(spec, samples, opts.gram_mode.value_or(GramMode::Implicit), opts.max_dense_bytes);
  const ShiftedOperator<GramMatrix> op(gram, static_cast<double>(samples.size()) * lambda);
  const Vector h = h_vector(spec, samples);
  auto [c, report] = conjugate_gradient(op, Vector(h / lambda), tol, max_iter);
  FitDiagnostics diag;
  diag.cg = report;
  if (!report.converged) {
    diag.warnings.push_back("conjugate gradient stopped after " + std::to_string(report.iterations) +
                            " iterations at relative residual " + std::to_string(report.relative_residual));
  }
  return {spec, samples, samples.data(), std::move(c), -1.0 / lambda, Tikhonov{lambda}, {}, std::move(diag)};
}

/// Any filter with g(0) = 0 applied over the non-zero spectrum:
///   c = -sum_j g(sigma_j) / (M sigma_j) u_j u_j^T h,  a = 0.
inline FittedScoreEstimator fit_spectral_filter(const SampleMatrix& samples, const MatrixKernelSpec& spec,
                                                const CustomFilter& filter, const FitOptions& opts = {}) {
  const auto s = detail::spectrum_of(spec, samples, opts);
  const double floor = detail::rank_floor(s);
  if (!(s.sigma(0) > 0.0)) throw FitError("kernel matrix has no non-zero eigenvalues");
  const double m = static_cast<double>(samples.size());
  const Vector h = h_vector(spec, samples);
  FitDiagnostics diag;
  diag.retained = detail::count_at_least(s.sigma, floor);
  Vector c = detail::filtered_coefficients(
      s, h, samples.size(), [&](double sigma) { return filter.g(sigma) / (m * sigma); }, floor);
  return {spec, samples, samples.data(), std::move(c), 0.0, filter, {}, std::move(diag)};
}

/// Tikhonov-type filter: g(s) = 1 / (s + lambda) on s > 0. At the samples
/// the stacked prediction equals -(K / M + lambda I)^{-1} h.
inline FittedScoreEstimator fit_truncated_tikhonov(const SampleMatrix& samples, const MatrixKernelSpec& spec,
                                                   double lambda, const FitOptions& opts = {}) {
  detail::require_positive(lambda, "lambda");
  const auto s = detail::spectrum_of(spec, samples, opts);
  if (!(s.sigma(0) > 0.0)) throw FitError("degenerate kernel: all eigenvalues are zero");
  const double floor = detail::rank_floor(s);
  const double m = static_cast<double>(samples.size());
  const Vector h = h_vector(spec, samples);
  FitDiagnostics diag;
  diag.retained = detail::count_at_least(s.sigma, floor);
  Vector c = detail::filtered_coefficients(
      s, h, samples.size(), [&](double sigma) { return 1.0 / ((sigma + lambda) * m * sigma); }, floor);
  return {spec, samples, samples.data(), std::move(c), 0.0, TruncatedTikhonov{lambda}, {}, std::move(diag)};
}

/// Spectral cut-off: g(s) = 1 / s for s >= threshold.
inline FittedScoreEstimator fit_spectral_cutoff(const SampleMatrix& samples, const MatrixKernelSpec& spec,
                                                SpectralCutoff cutoff, const FitOptions& opts = {}) {
  const Index n = samples.size() * samples.dim();
  if (cutoff.rank == 0) {
    detail::require_positive(cutoff.threshold, "spectral cut-off threshold");
  } else if (cutoff.rank < 1 || cutoff.rank > n) {
    throw InputError("spectral cut-off rank must lie in [1, " + std::to_string(n) + "]");
  }
  const auto s = detail::spectrum_of(spec, samples, opts);
  const double floor = detail::rank_floor(s);
  FitDiagnostics diag;
  double threshold = cutoff.threshold;
  if (cutoff.rank > 0) {
    Index rank = cutoff.rank;
    const Index numeric_rank = detail::count_at_least(s.sigma, floor);
    if (rank > numeric_rank) {
      diag.warnings.push_back("requested rank " + std::to_string(rank) + " exceeds numeric rank " +
                              std::to_string(numeric_rank) + "; clamped");
      rank = std::max<Index>(numeric_rank, 1);
    }
    threshold = s.sigma(rank - 1);
  }
  diag.threshold = threshold;
  const double keep_from = std::max(threshold, floor);
  diag.retained = detail::count_at_least(s.sigma, keep_from);
  const double m = static_cast<double>(samples.size());
  const Vector h = h_vector(spec, samples);
  Vector c = detail::filtered_coefficients(
      s, h, samples.size(), [&](double sigma) { return 1.0 / (m * sigma * sigma); }, keep_from);
  return {spec, samples, samples.data(), std::move(c), 0.0, SpectralCutoff{threshold, cutoff.rank}, {},
          std::move(diag)};
}

namespace detail {

// Shared driver for the two-term recurrences
//   s_t = (1 + u_t) s_{t-1} - u_t s_{t-2} - w_t (zeta + L s_{t-1}),  s_t = a_t zeta + K_xX c_t,
// which gives
//   a_t = (1 + u_t) a_{t-1} - u_t a_{t-2} - w_t
//   c_t = (1 + u_t) c_{t-1} - (w_t / M)(a_{t-1} h + K c_{t-1}) - u_t c_{t-2}.
// `emit(t, a_t, c_t)` is called after every step.
template <class Coeffs, class Emit>
void run_recurrence(const GramMatrix& gram, const Vector& h, Index n_samples, int t_max, Coeffs&& coeffs,
                    Emit&& emit) {
  const double m = static_cast<double>(n_samples);
  Vector c_prev = Vector::Zero(h.size());
  Vector c_cur = Vector::Zero(h.size());
  Vector kc(h.size());
  double a_prev = 0.0;
  double a_cur = 0.0;
  for (int t = 1; t <= t_max; ++t) {
    const auto [u, w] = coeffs(t);
    gram.apply(c_cur, kc);
    Vector c_next = (1.0 + u) * c_cur - (w / m) * (a_cur * h + kc) - u * c_prev;
    const double a_next = (1.0 + u) * a_cur - u * a_prev - w;
    if (!c_next.allFinite() || !std::isfinite(a_next)) {
      throw NumericError("iterative regularization diverged at step " + std::to_string(t));
    }
    c_prev = std::move(c_cur);
    c_cur = std::move(c_next);
    a_prev = a_cur;
    a_cur = a_next;
    emit(t, a_cur, c_cur);
  }
}

}  // namespace detail

namespace detail {

// Fills every slot whose requested iteration count is t.
template <class Make>
void collect_path(const std::vector<int>& iterations, int t, Make&& make,
                  std::vector<std::optional<FittedScoreEstimator>>& slots) {
  for (std::size_t i = 0; i < iterations.size(); ++i) {
    if (iterations[i] == t) slots[i].emplace(make());
  }
}

inline std::vector<FittedScoreEstimator> unwrap(std::vector<std::optional<FittedScoreEstimator>>& slots) {
  std::vector<FittedScoreEstimator> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

inline void check_iterations(const std::vector<int>& iterations, const char* method) {
  if (iterations.empty()) throw InputError(std::string(method) + " needs at least one iteration count");
  for (int t : iterations) {
    if (t < 1) throw InputError(std::string(method) + " iteration counts must be >= 1");
  }
}

}  // namespace detail

/// Landweber estimators for every requested iteration count, from one run of
/// s_t = s_{t-1} - step (zeta + L s_{t-1}), s_0 = 0. Equals the filter
/// g(s) = (1 - (1 - step s)^t) / s with a = -t step. `step` = 0 selects 0.9 / sigma_max(K / M).
inline std::vector<FittedScoreEstimator> fit_landweber_path(const SampleMatrix& samples, const MatrixKernelSpec& spec,
                                                            double step, const std::vector<int>& iterations,
                                                            const FitOptions& opts = {}) {
  detail::check_iterations(iterations, "Landweber");
  if (step < 0.0 || !std::isfinite(step)) throw InputError("Landweber step must be positive");
  const GramMatrix gram(spec, samples, opts.gram_mode.value_or(GramMode::Implicit), opts.max_dense_bytes);
  const double m = static_cast<double>(samples.size());
  const double sigma_max = power_iteration(gram, 1e-3, 50) / m;
  FitDiagnostics diag;
  diag.sigma_max = sigma_max;
  if (step == 0.0) {
    if (!(sigma_max > 0.0)) throw FitError("Landweber: kernel matrix is zero");
    step = 0.9 / sigma_max;
  } else if (!(step * sigma_max * (1.0 + 1e-3) < 1.0)) {
    throw FitError("Landweber step " + std::to_string(step) + " violates step * sigma_max(K/M) < 1 (sigma_max ~ " +
                   std::to_string(sigma_max) + ")");
  }
  diag.step = step;
  const Vector h = h_vector(spec, samples);
  const int t_max = *std::max_element(iterations.begin(), iterations.end());
  std::vector<std::optional<FittedScoreEstimator>> slots(iterations.size());
  detail::run_recurrence(
      gram, h, samples.size(), t_max, [&](int) { return NuCoefficients{0.0, step}; },
      [&](int t, double at, const Vector& ct) {
        detail::collect_path(iterations, t, [&] {
          return FittedScoreEstimator(spec, samples, samples.data(), ct, at, Landweber{step, t}, {}, diag);
        }, slots);
      });
  return detail::unwrap(slots);
}

inline FittedScoreEstimator fit_landweber(const SampleMatrix& samples, const MatrixKernelSpec& spec, Landweber params,
                                          const FitOptions& opts = {}) {
  if (params.iterations < 1) throw InputError("Landweber needs at least one iteration");
  return std::move(fit_landweber_path(samples, spec, params.step, {params.iterations}, opts).front());
}

/// Estimators of the nu-method for every requested iteration count, from one run.
inline std::vector<FittedScoreEstimator> fit_nu_method_path(const SampleMatrix& samples, const MatrixKernelSpec& spec,
                                                            double nu, const std::vector<int>& iterations,
                                                            const FitOptions& opts = {}) {
  if (!(nu >= 1.0) || !std::isfinite(nu)) throw InputError("nu-method requires nu >= 1");
  detail::check_iterations(iterations, "nu-method");
  const GramMatrix gram(spec, samples, opts.gram_mode.value_or(GramMode::Implicit), opts.max_dense_bytes);
  FitDiagnostics diag;
  // The recursion assumes the spectrum of K / M lies in [0, 1]; trace(K) / M bounds it cheaply.
  const double trace_bound = spec.kind == KernelKind::Diagonal
                                 ? spec.scalar.derivs(0.0).value
                                 : -2.0 * spec.scalar.derivs(0.0).d1 * static_cast<double>(samples.dim());
  if (trace_bound > 1.0) {
    diag.warnings.push_back("trace bound on sigma_max(K/M) is " + std::to_string(trace_bound) +
                            "; the nu-method assumes sigma_max <= 1");
  }
  const Vector h = h_vector(spec, samples);
  const int t_max = *std::max_element(iterations.begin(), iterations.end());
  std::vector<std::optional<FittedScoreEstimator>> slots(iterations.size());
  detail::run_recurrence(
      gram, h, samples.size(), t_max, [&](int t) { return nu_coefficients(t, nu); },
      [&](int t, double at, const Vector& ct) {
        detail::collect_path(iterations, t, [&] {
          return FittedScoreEstimator(spec, samples, samples.data(), ct, at, NuMethod{nu, t}, {}, diag);
        }, slots);
      });
  return detail::unwrap(slots);
}

inline FittedScoreEstimator fit_nu_method(const SampleMatrix& samples, const MatrixKernelSpec& spec, NuMethod params,
                                          const FitOptions& opts = {}) {
  if (params.iterations < 1) throw InputError("nu-method needs at least one iteration");
  return std::move(fit_nu_method_path(samples, spec, params.nu, {params.iterations}, opts).front());
}

// ---------------------------------------------------------------------------
// Nystrom

/// Filter applied to the spectrum of the compressed operator (full spectrum).
struct NystromFilter {
  std::string name;
  std::function<double(double)> g;
};

using NystromScheme = std::variant<TruncatedTikhonov, NystromFilter>;

namespace detail {

inline RowMatrix select_rows(const RowMatrix& x, const std::vector<Index>& idx) {
  RowMatrix out(static_cast<Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = x.row(idx[i]);
  return out;
}

// Dense K(A, B) block matrix, (|A| d) x (|B| d).
inline Matrix cross_gram(const MatrixKernelSpec& spec, const RowMatrix& a, const RowMatrix& b) {
  const Index d = a.cols();
  Matrix out(a.rows() * d, b.rows() * d);
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) out.block(i * d, j * d, d, d) = eval_matrix_kernel(spec, a.row(i), b.row(j));
  }
  return out;
}

}  // namespace detail

/// Score estimator restricted to span{K(., z_n) c : z_n in subset}.
///
/// TruncatedTikhonov solves (K_ZX K_XZ / M + lambda K_ZZ) c = -h_Z with
/// h_Z = (zeta(z_1), ..., zeta(z_N)); no matrix square roots are formed.
/// NystromFilter applies g to L = K_ZZ^{-1/2} K_ZX K_XZ K_ZZ^{-1/2} / M and
/// sets c = -K_ZZ^{-1/2} g(L) K_ZZ^{-1/2} h_Z.
inline FittedScoreEstimator fit_nystrom(const SampleMatrix& samples, const std::vector<Index>& subset,
                                        const MatrixKernelSpec& spec, const NystromScheme& scheme) {
  if (subset.empty()) throw InputError("Nystrom subset is empty");
  std::set<Index> seen;
  for (Index i : subset) {
    if (i < 0 || i >= samples.size()) throw InputError("Nystrom subset index out of range: " + std::to_string(i));
    if (!seen.insert(i).second) throw InputError("Nystrom subset index repeated: " + std::to_string(i));
  }
  const RowMatrix z = detail::select_rows(samples.data(), subset);
  const double m = static_cast<double>(samples.size());
  const Matrix kzz = detail::cross_gram(spec, z, z);
  const Matrix kzx = detail::cross_gram(spec, z, samples.data());
  const Matrix kzx_kxz = kzx * kzx.transpose() / m;
  const RowMatrix hz_rows = zeta_rows(spec, samples, z);
  const Vector hz = detail::reshape_rows(hz_rows);

  FitDiagnostics diag;
  const double base_jitter = 1e-10 * kzz.trace() / static_cast<double>(kzz.rows());
  constexpr int kAttempts = 4;
  Vector c;
  RegularizerSpec recorded = TruncatedTikhonov{0.0};
  for (int attempt = 0; attempt < kAttempts && c.size() == 0; ++attempt) {
    const double jitter = attempt == 0 ? 0.0 : base_jitter * std::pow(100.0, attempt - 1);
    Matrix kzz_j = kzz;
    kzz_j.diagonal().array() += jitter;
    try {
      if (const auto* tt = std::get_if<TruncatedTikhonov>(&scheme)) {
        detail::require_positive(tt->lambda, "lambda");
        recorded = *tt;
        c = -solve_spd(Matrix(kzx_kxz + tt->lambda * kzz_j), hz);
      } else {
        const auto& f = std::get<NystromFilter>(scheme);
        recorded = CustomFilter{f.name, f.g};
        const EigenSystem ez = sym_eig(kzz_j);
        const double floor = kRankEpsilon * ez.values(0);
        if (!(ez.values.minCoeff() > floor)) throw SolverError("K_ZZ is numerically singular");
        const Matrix inv_sqrt =
            ez.vectors * ez.values.cwiseSqrt().cwiseInverse().asDiagonal() * ez.vectors.transpose();
        Matrix l = inv_sqrt * kzx_kxz * inv_sqrt;
        l = 0.5 * (l + l.transpose());
        const EigenSystem el = sym_eig(l);
        c = -(inv_sqrt * apply_spectral_filter(el, f.g, Vector(inv_sqrt * hz)));
      }
      if (attempt > 0) diag.warnings.push_back("K_ZZ jittered by " + std::to_string(jitter));
    } catch (const SolverError&) {
      c.resize(0);
    }
  }
  if (c.size() == 0) throw FitError("Nystrom fit failed: K_ZZ is numerically singular even after jitter");
  return {spec, samples, z, std::move(c), 0.0, std::move(recorded), subset, std::move(diag)};
}

/// Dispatches on the regularizer. Tikhonov uses options.tikhonov_solver.
inline FittedScoreEstimator fit(const SampleMatrix& samples, const MatrixKernelSpec& spec,
                                const RegularizerSpec& scheme, const FitOptions& opts = {}) {
  return std::visit(
      [&](const auto& s) -> FittedScoreEstimator {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Tikhonov>) {
          if (opts.tikhonov_solver == TikhonovSolver::ConjugateGradient) {
            return fit_tikhonov_cg(samples, spec, s.lambda, opts.cg_tolerance, opts.cg_max_iterations, opts);
          }
          return fit_tikhonov(samples, spec, s.lambda, opts);
        } else if constexpr (std::is_same_v<S, TruncatedTikhonov>) {
          return fit_truncated_tikhonov(samples, spec, s.lambda, opts);
        } else if constexpr (std::is_same_v<S, SpectralCutoff>) {
          return fit_spectral_cutoff(samples, spec, s, opts);
        } else if constexpr (std::is_same_v<S, Landweber>) {
          return fit_landweber(samples, spec, s, opts);
        } else if constexpr (std::is_same_v<S, NuMethod>) {
          return fit_nu_method(samples, spec, s, opts);
        } else {
          return fit_spectral_filter(samples, spec, s, opts);
        }
      },
      scheme);
}

}  // namespace scorekit
