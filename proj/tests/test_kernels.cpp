#include <gtest/gtest.h>

#include <cmath>

#include "scorekit/kernels.hpp"
#include "scorekit/linalg.hpp"
#include "test_support.hpp"

using namespace scorekit;
using scorekit::oracle::random_points;
using scorekit::oracle::random_vector;
using scorekit::oracle::rel_err;

namespace {

MatrixKernelSpec curlfree(KernelFamily f = KernelFamily::IMQ, double bw = 1.0) {
  return {KernelKind::CurlFree, ScalarRadialKernel(f, bw)};
}
MatrixKernelSpec diagonal(KernelFamily f = KernelFamily::Gaussian, double bw = 1.0) {
  return {KernelKind::Diagonal, ScalarRadialKernel(f, bw)};
}

}  // namespace

TEST(ScalarDerivs, ImqAtZero) {
  const auto r = scalar_derivs(ScalarRadialKernel(KernelFamily::IMQ, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(r.value, 1.0);
  EXPECT_DOUBLE_EQ(r.d1, -0.5);
  EXPECT_DOUBLE_EQ(r.d2, 0.75);
  EXPECT_DOUBLE_EQ(r.d3, -1.875);
}

TEST(ScalarDerivs, GaussianAtZero) {
  const auto r = scalar_derivs(ScalarRadialKernel(KernelFamily::Gaussian, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(r.value, 1.0);
  EXPECT_DOUBLE_EQ(r.d1, -0.5);
  EXPECT_DOUBLE_EQ(r.d2, 0.25);
  EXPECT_DOUBLE_EQ(r.d3, -0.125);
}

TEST(ScalarDerivs, MatchFiniteDifferences) {
  for (auto fam : {KernelFamily::IMQ, KernelFamily::Gaussian}) {
    for (double bw : {0.5, 1.0, 3.0}) {
      const ScalarRadialKernel k(fam, bw);
      for (double u : {0.3, 1.0, 4.0, 10.0}) {
        const auto r = scalar_derivs(k, u);
        const double h = 1e-3 * bw * bw;
        EXPECT_NEAR(r.d1, oracle::fd_profile_derivative(fam, bw, u, 1, h), 1e-6 * std::abs(r.d1) + 1e-12);
        EXPECT_NEAR(r.d2, oracle::fd_profile_derivative(fam, bw, u, 2, h), 1e-5 * std::abs(r.d2) + 1e-10);
        // Richardson-extrapolated third difference; plain differences are too noisy here.
        const double h3 = 1e-2 * bw * bw;
        const double d3 = (4.0 * oracle::fd_profile_derivative(fam, bw, u, 3, h3 / 2) -
                           oracle::fd_profile_derivative(fam, bw, u, 3, h3)) /
                          3.0;
        EXPECT_NEAR(r.d3, d3, 1e-4 * std::abs(r.d3) + 1e-12);
      }
    }
  }
}

TEST(ScalarDerivs, RejectsBadArgument) {
  const ScalarRadialKernel k(KernelFamily::IMQ, 1.0);
  EXPECT_THROW(scalar_derivs(k, -1e-3), InputError);
  EXPECT_THROW(scalar_derivs(k, std::nan("")), InputError);
  EXPECT_THROW(ScalarRadialKernel(KernelFamily::IMQ, 0.0), InputError);
  EXPECT_THROW(ScalarRadialKernel(KernelFamily::Gaussian, -2.0), InputError);
}

TEST(MatrixKernel, DiagonalAtCoincidentPointsIsIdentity) {
  const Vector x = random_vector(4, 1);
  EXPECT_TRUE(eval_matrix_kernel(diagonal(), x, x).isApprox(Matrix::Identity(4, 4)));
}

TEST(MatrixKernel, CurlFreeImqAtCoincidentPointsIsIdentity) {
  const Vector x = random_vector(3, 2);
  EXPECT_TRUE(eval_matrix_kernel(curlfree(), x, x).isApprox(Matrix::Identity(3, 3)));
}

TEST(MatrixKernel, DimensionMismatch) {
  EXPECT_THROW(eval_matrix_kernel(curlfree(), Vector::Zero(2), Vector::Zero(3)), InputError);
}

TEST(MatrixKernel, SymmetryOnRandomPairs) {
  for (const auto& spec : {curlfree(KernelFamily::IMQ, 1.3), curlfree(KernelFamily::Gaussian, 0.7), diagonal()}) {
    for (int trial = 0; trial < 1000; ++trial) {
      const Vector x = random_vector(5, 100 + trial);
      const Vector y = random_vector(5, 5000 + trial);
      const Matrix kxy = eval_matrix_kernel(spec, x, y);
      const Matrix kyx = eval_matrix_kernel(spec, y, x);
      ASSERT_LE((kxy - kyx.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    }
  }
}

TEST(MatrixKernel, CurlFreeBlocksAreMixedPartialsOfScalarKernel) {
  for (auto fam : {KernelFamily::IMQ, KernelFamily::Gaussian}) {
    const double bw = 1.7;
    const auto spec = curlfree(fam, bw);
    for (int trial = 0; trial < 20; ++trial) {
      const Vector x = random_vector(4, 10 + trial);
      const Vector y = random_vector(4, 70 + trial);
      const Matrix k = eval_matrix_kernel(spec, x, y);
      Matrix fd(4, 4);
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) fd(i, j) = oracle::fd_mixed_partial(fam, bw, x, y, i, j, 1e-4 * bw);
      EXPECT_LE(rel_err(k, fd), 1e-5);
    }
  }
}

TEST(CurlFreeMatvec, CoincidentPoints) {
  const auto spec = curlfree(KernelFamily::IMQ, 2.0);
  const Vector x = random_vector(6, 3);
  const Vector a = random_vector(6, 4);
  const double phi1 = spec.scalar.derivs(0.0).d1;
  EXPECT_TRUE(curlfree_matvec(spec, x, x, a).isApprox(-2.0 * phi1 * a, 1e-15));
}

TEST(CurlFreeMatvec, MatchesDenseBlock) {
  const auto spec = curlfree(KernelFamily::IMQ, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector x = random_vector(20, trial);
    const Vector y = random_vector(20, 1000 + trial);
    const Vector a = random_vector(20, 2000 + trial);
    const Vector dense = eval_matrix_kernel(spec, x, y) * a;
    EXPECT_LE(rel_err(curlfree_matvec(spec, x, y, a), dense), 1e-12);
  }
}

TEST(CurlFreeMatvec, OrthogonalDirection) {
  const auto spec = curlfree(KernelFamily::Gaussian, 1.5);
  const Vector x = (Vector(3) << 1.0, 0.0, 0.0).finished();
  const Vector y = Vector::Zero(3);
  const Vector a = (Vector(3) << 0.0, 2.0, -1.0).finished();
  const double phi1 = spec.scalar.derivs(1.0).d1;
  EXPECT_TRUE(curlfree_matvec(spec, x, y, a).isApprox(-2.0 * phi1 * a, 1e-15));
}

TEST(CurlFreeMatvec, DiagonalSpecIsContractViolation) {
  EXPECT_THROW(curlfree_matvec(diagonal(), Vector::Zero(2), Vector::Ones(2), Vector::Ones(2)), ContractViolation);
}

TEST(Zeta, SingleSampleCurlFreeAtSampleIsZero) {
  const SampleMatrix s(random_points(1, 3, 9));
  EXPECT_EQ(zeta(curlfree(), s, s.data().row(0)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Zeta, SingleSampleDiagonalGaussian1d) {
  const SampleMatrix s(RowMatrix::Zero(1, 1));
  const Vector q = Vector::Ones(1);
  EXPECT_NEAR(zeta(diagonal(KernelFamily::Gaussian, 1.0), s, q)(0), 0.6065306597126334, 1e-15);
}

TEST(Zeta, SingleSampleCurlFreeIsParallelToOffset) {
  const SampleMatrix s(random_points(1, 5, 11));
  const Vector q = random_vector(5, 12);
  const Vector z = zeta(curlfree(KernelFamily::IMQ, 1.2), s, q);
  const Vector r = s.data().row(0).transpose() - q;
  EXPECT_NEAR(std::abs(z.normalized().dot(r.normalized())), 1.0, 1e-14);
}

TEST(Zeta, MatchesFiniteDifferenceDivergence) {
  for (const auto& spec : {curlfree(KernelFamily::IMQ, 1.4), curlfree(KernelFamily::Gaussian, 1.1),
                           diagonal(KernelFamily::IMQ, 0.9)}) {
    const SampleMatrix s(random_points(7, 3, 21));
    for (int trial = 0; trial < 5; ++trial) {
      const Vector q = random_vector(3, 300 + trial);
      EXPECT_LE(rel_err(zeta(spec, s, q), oracle::fd_zeta(spec, s.data(), q, 1e-5)), 1e-5);
    }
  }
}

TEST(Zeta, DimensionMismatch) {
  const SampleMatrix s(random_points(3, 2, 1));
  EXPECT_THROW(zeta(curlfree(), s, Vector::Zero(3)), InputError);
}

TEST(HVector, SingleCurlFreeSampleIsZero) {
  const SampleMatrix s(random_points(1, 4, 5));
  EXPECT_EQ(h_vector(curlfree(), s).cwiseAbs().maxCoeff(), 0.0);
}

TEST(HVector, TwoSampleGaussian1d) {
  const SampleMatrix s((RowMatrix(2, 1) << -1.0, 1.0).finished());
  const Vector h = h_vector(diagonal(KernelFamily::Gaussian, 1.0), s);
  EXPECT_NEAR(h(0), -0.1353352832366127, 1e-15);
  EXPECT_NEAR(h(1), 0.1353352832366127, 1e-15);
}

TEST(HVector, DiagonalMatchesScalarGradientSum) {
  const double bw = 1.3;
  const auto spec = diagonal(KernelFamily::IMQ, bw);
  const RowMatrix x = random_points(6, 3, 33);
  const Vector h = h_vector(spec, SampleMatrix(x));
  for (Index m = 0; m < 6; ++m) {
    for (Index i = 0; i < 3; ++i) {
      // (1/M) sum_l d/dx_i k(x, x_m) at x = x_l, by central differences
      double acc = 0.0;
      for (Index l = 0; l < 6; ++l) {
        Vector xp = x.row(l).transpose();
        Vector xm = xp;
        xp(i) += 1e-5;
        xm(i) -= 1e-5;
        const Vector xmm = x.row(m).transpose();
        acc += (oracle::direct_kernel(KernelFamily::IMQ, bw, xp, xmm) -
                oracle::direct_kernel(KernelFamily::IMQ, bw, xm, xmm)) /
               2e-5;
      }
      EXPECT_NEAR(h(m * 3 + i), acc / 6.0, 1e-9);
    }
  }
}

TEST(Gram, DiagonalIsKroneckerOfScalarGram) {
  const auto spec = diagonal(KernelFamily::IMQ, 1.1);
  const SampleMatrix s(random_points(5, 3, 4));
  const Matrix k = assemble_gram(spec, s, GramMode::Dense).dense();
  const Matrix g = scalar_gram(spec.scalar, s.data());
  Matrix kron = Matrix::Zero(15, 15);
  for (Index a = 0; a < 5; ++a)
    for (Index b = 0; b < 5; ++b) kron.block(a * 3, b * 3, 3, 3) = g(a, b) * Matrix::Identity(3, 3);
  EXPECT_LE((k - kron).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Gram, CurlFreeBlocksMatchPointwiseKernel) {
  const auto spec = curlfree(KernelFamily::IMQ, 0.8);
  const SampleMatrix s(random_points(2, 2, 8));
  const Matrix k = assemble_gram(spec, s, GramMode::Dense).dense();
  for (Index a = 0; a < 2; ++a)
    for (Index b = 0; b < 2; ++b)
      EXPECT_TRUE(k.block(a * 2, b * 2, 2, 2).isApprox(eval_matrix_kernel(spec, s.row(a), s.row(b)), 1e-15));
}

TEST(Gram, SymmetricAndPositiveSemidefinite) {
  std::uint64_t seed = 0;
  for (Index m : {3, 16, 64}) {
    for (Index d : {1, 4, 8}) {
      for (const auto& spec : {curlfree(KernelFamily::IMQ, 1.0), curlfree(KernelFamily::Gaussian, 2.0),
                               diagonal(KernelFamily::IMQ, 0.7)}) {
        const SampleMatrix s(random_points(m, d, ++seed));
        const Matrix k = assemble_gram(spec, s, GramMode::Dense).dense();
        EXPECT_EQ((k - k.transpose()).cwiseAbs().maxCoeff(), 0.0);
        const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(k, Eigen::EigenvaluesOnly).eigenvalues();
        EXPECT_GE(ev.minCoeff(), -1e-10 * ev.maxCoeff()) << "m=" << m << " d=" << d;
      }
    }
  }
}

TEST(Gram, ImplicitMatvecMatchesDense) {
  for (const auto& spec : {curlfree(KernelFamily::IMQ, 4.0), diagonal(KernelFamily::IMQ, 4.0)}) {
    const SampleMatrix s(random_points(200, 20, 77));
    const GramMatrix dense = assemble_gram(spec, s, GramMode::Dense);
    const GramMatrix implicit = assemble_gram(spec, s, GramMode::Implicit);
    for (int trial = 0; trial < 5; ++trial) {
      const Vector b = random_vector(4000, 900 + trial);
      EXPECT_LE(rel_err(gram_matvec(implicit, b), gram_matvec(dense, b)), 1e-10);
    }
    EXPECT_LT(implicit.memory_bytes() * 5, dense.memory_bytes());
  }
}

TEST(Gram, ImplicitMatvecMatchesPairwiseCurlFreeMatvec) {
  const auto spec = curlfree(KernelFamily::Gaussian, 2.0);
  const SampleMatrix s(random_points(30, 6, 78));
  const Vector b = random_vector(180, 79);
  Vector expected = Vector::Zero(180);
  for (Index m = 0; m < 30; ++m)
    for (Index l = 0; l < 30; ++l)
      expected.segment(m * 6, 6) += curlfree_matvec(spec, s.row(m), s.row(l), b.segment(l * 6, 6));
  EXPECT_LE(rel_err(gram_matvec(assemble_gram(spec, s, GramMode::Implicit), b), expected), 1e-12);
}

TEST(Gram, MatvecEdgeCases) {
  const auto spec = curlfree();
  const SampleMatrix s(random_points(4, 3, 80));
  const GramMatrix g = assemble_gram(spec, s, GramMode::Implicit);
  EXPECT_EQ(gram_matvec(g, Vector::Zero(12)).cwiseAbs().maxCoeff(), 0.0);
  const Matrix dense = assemble_gram(spec, s, GramMode::Dense).dense();
  EXPECT_LE(rel_err(gram_matvec(g, Vector::Unit(12, 0)), dense.col(0)), 1e-14);
  EXPECT_THROW(gram_matvec(g, Vector::Zero(11)), InputError);
  EXPECT_THROW((void)g.dense(), ContractViolation);
}

TEST(Gram, DenseBudgetIsEnforced) {
  const SampleMatrix s(random_points(50, 10, 81));
  EXPECT_THROW(assemble_gram(curlfree(), s, GramMode::Dense, 1024), ResourceError);
}

TEST(SampleMatrix, Validation) {
  EXPECT_THROW(SampleMatrix(RowMatrix(0, 2)), InputError);
  RowMatrix bad = RowMatrix::Zero(2, 2);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(SampleMatrix{bad}, InputError);
}
