#pragma once

// Synthetic Gaussian mixtures with analytic scores, seeded sampling, the
// median bandwidth heuristic, and the normalized squared-error metric.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "scorekit/errors.hpp"
#include "scorekit/kernels.hpp"
#include "scorekit/types.hpp"

namespace scorekit {

/// Equal-covariance mixture sum_i w_i N(mu_i, s^2 I).
class MixtureDistribution {
 public:
  MixtureDistribution(RowMatrix means, Vector weights, double scale = 1.0)
      : means_(std::move(means)), weights_(std::move(weights)), scale_(scale) {
    if (means_.rows() < 1 || means_.cols() < 1) throw InputError("mixture needs at least one component");
    if (weights_.size() != means_.rows()) throw InputError("mixture weights do not match number of means");
    if (!means_.allFinite()) throw InputError("mixture means must be finite");
    if (!(scale_ > 0.0) || !std::isfinite(scale_)) throw InputError("mixture scale must be positive");
    if ((weights_.array() < 0.0).any() || !weights_.allFinite()) throw InputError("mixture weights must be >= 0");
    if (std::abs(weights_.sum() - 1.0) > 1e-12) throw InputError("mixture weights must sum to 1");
    log_weights_ = weights_.array().log();
  }

  Index dim() const { return means_.cols(); }
  Index components() const { return means_.rows(); }
  const RowMatrix& means() const { return means_; }
  const Vector& weights() const { return weights_; }
  double scale() const { return scale_; }
  const Vector& log_weights() const { return log_weights_; }

 private:
  RowMatrix means_;
  Vector weights_;
  double scale_;
  Vector log_weights_;
};

/// Unit-covariance mixture of d components at distinct vertices of {0,1}^d,
/// drawn without replacement from the seeded generator; equal weights.
inline MixtureDistribution make_grid_distribution(Index d, std::uint64_t seed) {
  if (d < 1) throw InputError("grid distribution needs d >= 1");
  std::mt19937_64 rng(seed);
  std::set<std::vector<bool>> used;
  RowMatrix means(d, d);
  Index filled = 0;
  while (filled < d) {
    std::vector<bool> v(static_cast<std::size_t>(d));
    for (Index i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] = (rng() >> 63) != 0;
    if (!used.insert(v).second) continue;
    for (Index i = 0; i < d; ++i) means(filled, i) = v[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    ++filled;
  }
  return {std::move(means), Vector::Constant(d, 1.0 / static_cast<double>(d))};
}

/// N(0, I_d).
inline MixtureDistribution standard_gaussian(Index d) {
  return {RowMatrix::Zero(1, d), Vector::Ones(1)};
}

namespace detail {

// Log-responsibility terms log w_i - |x - mu_i|^2 / (2 s^2).
template <class DX>
Vector component_log_terms(const MixtureDistribution& dist, const Eigen::MatrixBase<DX>& x) {
  const double inv = 1.0 / (2.0 * dist.scale() * dist.scale());
  Vector t(dist.components());
  for (Index i = 0; i < dist.components(); ++i) {
    double sq = 0.0;
    for (Index j = 0; j < dist.dim(); ++j) {
      const double r = x(j) - dist.means()(i, j);
      sq += r * r;
    }
    t(i) = dist.log_weights()(i) - sq * inv;
  }
  return t;
}

}  // namespace detail

/// log p(x) including the normalizing constant.
template <class DX>
double log_density(const MixtureDistribution& dist, const Eigen::MatrixBase<DX>& x) {
  const Vector t = detail::component_log_terms(dist, x);
  const double top = t.maxCoeff();
  const double d = static_cast<double>(dist.dim());
  const double log_norm = -0.5 * d * std::log(2.0 * M_PI * dist.scale() * dist.scale());
  return top + std::log((t.array() - top).exp().sum()) + log_norm;
}

/// grad log p(x) = sum_i r_i(x) (mu_i - x) / s^2 with log-sum-exp responsibilities.
template <class DX>
Vector true_score(const MixtureDistribution& dist, const Eigen::MatrixBase<DX>& x) {
  detail::require_same_dim(x.size(), dist.dim(), "true_score");
  if (!x.allFinite()) throw InputError("true_score: query is not finite");
  const Vector t = detail::component_log_terms(dist, x);
  Vector resp = (t.array() - t.maxCoeff()).exp();
  resp /= resp.sum();
  Vector out = Vector::Zero(dist.dim());
  for (Index i = 0; i < dist.components(); ++i) {
    for (Index j = 0; j < dist.dim(); ++j) out(j) += resp(i) * (dist.means()(i, j) - x(j));
  }
  return out / (dist.scale() * dist.scale());
}

inline RowMatrix true_score_rows(const MixtureDistribution& dist, const RowMatrix& x) {
  RowMatrix out(x.rows(), x.cols());
  for (Index q = 0; q < x.rows(); ++q) out.row(q) = true_score(dist, x.row(q)).transpose();
  return out;
}

/// M i.i.d. draws; a pure function of (dist, M, seed).
inline SampleMatrix sample(const MixtureDistribution& dist, Index m, std::uint64_t seed) {
  if (m < 1) throw InputError("sample size must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector cumulative(dist.components());
  double acc = 0.0;
  for (Index i = 0; i < dist.components(); ++i) cumulative(i) = (acc += dist.weights()(i));
  RowMatrix out(m, dist.dim());
  for (Index r = 0; r < m; ++r) {
    const double pick = uniform(rng) * acc;
    Index comp = 0;
    while (comp + 1 < dist.components() && (cumulative(comp) <= pick || dist.weights()(comp) == 0.0)) ++comp;
    for (Index j = 0; j < dist.dim(); ++j) out(r, j) = dist.means()(comp, j) + dist.scale() * normal(rng);
  }
  return SampleMatrix(std::move(out));
}

/// Median of the M(M-1)/2 pairwise Euclidean distances (mean of the two
/// middle values when the count is even).
inline double median_bandwidth(const SampleMatrix& samples) {
  const Index m = samples.size();
  if (m < 2) throw InputError("median bandwidth needs at least two samples");
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
  for (Index i = 0; i < m; ++i) {
    for (Index j = i + 1; j < m; ++j) dist.push_back((samples.row(i) - samples.row(j)).norm());
  }
  const std::size_t n = dist.size();
  const std::size_t mid = n / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double med = dist[mid];
  if (n % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (lower + med);
  }
  if (!(med > 0.0)) throw InputError("median bandwidth is zero: samples are degenerate");
  return med;
}

struct ErrorReport {
  double mean_squared_error = 0.0;  // E |s_p - s|^2 / d over the evaluation draw
  std::vector<double> per_seed;
  double median = 0.0;
  double stddev = 0.0;
};

/// Median and population standard deviation of per-seed errors.
inline ErrorReport summarize_errors(std::vector<double> values) {
  ErrorReport r;
  r.per_seed = values;
  if (values.empty()) return r;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  r.stddev = std::sqrt(var / static_cast<double>(values.size()));
  r.mean_squared_error = mean;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  r.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return r;
}

/// mean over the rows of |truth - estimate|^2 / d.
inline double normalized_distance(const RowMatrix& truth, const RowMatrix& estimate) {
  if (truth.rows() != estimate.rows() || truth.cols() != estimate.cols()) {
    throw InputError("normalized_distance: shape mismatch");
  }
  return (truth - estimate).squaredNorm() / static_cast<double>(truth.size());
}

/// Draws n_eval fresh points from `dist` and reports E |s_p - s|^2 / d.
/// `estimator` is any callable mapping a Q x d query matrix to Q x d scores.
template <class Estimator>
ErrorReport normalized_error(Estimator&& estimator, const MixtureDistribution& dist, Index n_eval,
                             std::uint64_t seed) {
  const SampleMatrix eval = sample(dist, n_eval, seed);
  const RowMatrix truth = true_score_rows(dist, eval.data());
  const RowMatrix est = estimator(eval.data());
  const double e = normalized_distance(truth, est);
  ErrorReport r = summarize_errors({e});
  return r;
}

}  // namespace scorekit
