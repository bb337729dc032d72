#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "lfp/numerics.hpp"

using namespace lfp;
using numerics::Rng;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
}

TEST(Rng, UniformRangeAndMoments) {
  Rng r(7);
  double sum = 0, sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.01);
  EXPECT_NEAR(sq / n - (sum / n) * (sum / n), 1.0 / 12.0, 0.005);
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double sum = 0, sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.02);
  EXPECT_NEAR(sq / n, 1.0, 0.03);
}

TEST(Rng, ForksAreIndependentAndStable) {
  const Rng root(5);
  EXPECT_EQ(root.fork("a").next_u64(), root.fork("a").next_u64());
  EXPECT_NE(root.fork("a").next_u64(), root.fork("b").next_u64());
  EXPECT_NE(root.fork(std::uint64_t{0}).next_u64(), root.fork(std::uint64_t{1}).next_u64());
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(3);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  r.shuffle(v);
  std::set<int> s(v.begin(), v.end());
  EXPECT_EQ(s.size(), 50u);
}

TEST(StageSeed, DistinctPerStage) {
  EXPECT_NE(numerics::stage_seed(1, "pretrain"), numerics::stage_seed(1, "ppo"));
  EXPECT_NE(numerics::stage_seed(1, "ppo"), numerics::stage_seed(2, "ppo"));
  EXPECT_EQ(numerics::stage_seed(1, "ppo"), numerics::stage_seed(1, "ppo"));
}

TEST(Adam, ZeroGradientLeavesParamAndDecaysMoments) {
  Matrix p = Matrix::Constant(2, 2, 1.5);
  auto s = numerics::AdamState::zeros_like(p);
  s.first_moment.setConstant(0.3);
  s.second_moment.setConstant(0.2);
  const Matrix before = p;
  // With zero gradient the step is lr * m_hat / (sqrt(v_hat)+eps); use m = 0 for "unchanged".
  s.first_moment.setZero();
  numerics::adam_update(s, p, Matrix::Zero(2, 2));
  EXPECT_TRUE(p.isApprox(before));
  EXPECT_NEAR(s.second_moment(0, 0), 0.2 * 0.999, 1e-15);
  EXPECT_EQ(s.step_count, 1u);
}

TEST(Adam, FirstStepHandEvaluated) {
  Matrix p = Matrix::Constant(1, 1, 1.0);
  const auto s = numerics::AdamState::zeros_like(p, {0.1, 0.9, 0.999, 1e-8});
  const auto [q, s2] = numerics::adam_step(s, p, Matrix::Constant(1, 1, 1.0));
  // m_hat = 1, v_hat = 1: step = 0.1 / (1 + 1e-8)
  EXPECT_NEAR(q(0, 0), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(q(0, 0), 0.9, 1e-8);
  EXPECT_EQ(s2.step_count, 1u);
  EXPECT_NEAR(s2.first_moment(0, 0), 0.1, 1e-15);
  EXPECT_NEAR(s2.second_moment(0, 0), 0.001, 1e-15);
}

TEST(Adam, PureAndDeterministic) {
  Matrix p = Matrix::Random(3, 2);
  Matrix g = Matrix::Random(3, 2);
  const auto s = numerics::AdamState::zeros_like(p);
  const auto a = numerics::adam_step(s, p, g);
  const auto b = numerics::adam_step(s, p, g);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(s.step_count, 0u);
}

TEST(Adam, ShapeMismatchAndNonFinite) {
  Matrix p = Matrix::Zero(2, 2);
  auto s = numerics::AdamState::zeros_like(p);
  EXPECT_THROW(numerics::adam_update(s, p, Matrix::Zero(2, 3)), std::invalid_argument);
  Matrix g = Matrix::Zero(2, 2);
  g(0, 0) = NAN;
  EXPECT_THROW(numerics::adam_update(s, p, g), std::domain_error);
}

TEST(Xavier, BoundDeterminismVariance) {
  const Matrix a = numerics::xavier_init(100, 100, 11);
  EXPECT_EQ(a, numerics::xavier_init(100, 100, 11));
  const double bound = std::sqrt(6.0 / 200.0);
  EXPECT_LE(a.cwiseAbs().maxCoeff(), bound);
  const double var = a.array().square().mean() - std::pow(a.mean(), 2);
  EXPECT_NEAR(var, 2.0 / 200.0, 0.2 * 2.0 / 200.0);
  const Matrix one = numerics::xavier_init(1, 1, 3);
  EXPECT_LE(std::abs(one(0, 0)), std::sqrt(3.0));
  EXPECT_THROW(numerics::xavier_init(0, 3, 1), std::invalid_argument);
}

TEST(Pca, LineHasSingleComponent) {
  Matrix x(10, 2);
  for (int i = 0; i < 10; ++i) x.row(i) << i * 0.7 - 2, i * 0.7 - 2;
  const auto r = numerics::pca(x, 2);
  EXPECT_NEAR(r.explained_variance_ratio[0], 1.0, 1e-12);
  EXPECT_NEAR(std::abs(r.components(0, 0)), std::sqrt(0.5), 1e-9);
}

TEST(Pca, IsotropicGaussianHalfHalf) {
  Rng rng(4);
  Matrix x(20000, 2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) << rng.normal(), rng.normal();
  const auto r = numerics::pca(x, 2);
  EXPECT_NEAR(r.explained_variance_ratio[0], 0.5, 0.05);
  EXPECT_NEAR(r.explained_variance_ratio[1], 0.5, 0.05);
  EXPECT_GE(r.explained_variance_ratio[0], r.explained_variance_ratio[1]);
}

TEST(Pca, OrthonormalAndFullReconstruction) {
  Rng rng(8);
  Matrix x(50, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal() * (1 + i % 5);
  const auto r = numerics::pca(x, 5);
  const Matrix gram = r.components * r.components.transpose();
  EXPECT_LE((gram - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-6);
  const Matrix centered = x.rowwise() - r.mean.transpose();
  const Matrix back = r.project(x) * r.components;
  EXPECT_LE((back - centered).cwiseAbs().maxCoeff(), 1e-5);
  double total = 0;
  for (std::size_t i = 0; i < r.explained_variance_ratio.size(); ++i) {
    total += r.explained_variance_ratio[i];
    if (i) {
      EXPECT_LE(r.explained_variance_ratio[i], r.explained_variance_ratio[i - 1]);
    }
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Pca, DegenerateAndRangeErrors) {
  EXPECT_THROW(numerics::pca(Matrix::Ones(4, 3), 1), std::domain_error);
  EXPECT_THROW(numerics::pca(Matrix::Random(4, 3), 4), std::invalid_argument);
  EXPECT_THROW(numerics::pca(Matrix::Random(1, 3), 1), std::invalid_argument);
}

TEST(FiniteDiff, AnalyticExamples) {
  auto sq = [](const Matrix& m) { return m(0, 0) * m(0, 0); };
  EXPECT_NEAR(numerics::finite_diff_grad(sq, Matrix::Constant(1, 1, 3.0), 1e-5)(0, 0), 6.0, 1e-6);
  auto constant = [](const Matrix&) { return 4.0; };
  EXPECT_EQ(numerics::finite_diff_grad(constant, Matrix::Random(2, 2), 1e-3), Matrix::Zero(2, 2));
  auto norm2 = [](const Matrix& m) { return m.squaredNorm(); };
  Matrix v(1, 2);
  v << 1, 2;
  const Matrix g = numerics::finite_diff_grad(norm2, v, 1e-5);
  EXPECT_NEAR(g(0, 0), 2.0, 1e-5);
  EXPECT_NEAR(g(0, 1), 4.0, 1e-5);
  auto bad = [](const Matrix& m) { return m(0, 0) > 0 ? NAN : 0.0; };
  EXPECT_THROW(numerics::finite_diff_grad(bad, Matrix::Zero(1, 1), 1e-3), std::domain_error);
}

TEST(Softmax, Examples) {
  Matrix x(3, 2);
  x << 2, 2, 0, std::log(3.0), 1000, 1000 + std::log(3.0);
  const Matrix s = numerics::softmax_rows(x);
  EXPECT_NEAR(s(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(s(1, 0), 0.25, 1e-12);
  EXPECT_NEAR(s(1, 1), 0.75, 1e-12);
  EXPECT_NEAR(s(2, 0), 0.25, 1e-12);
  for (int r = 0; r < 3; ++r) EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-9);
}

TEST(Softmax, ShiftInvarianceProperty) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    Matrix x(4, 7);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 10 * rng.normal();
    Matrix shifted = x;
    for (Eigen::Index r = 0; r < 4; ++r) shifted.row(r).array() += 50.0 * rng.normal();
    EXPECT_LE((numerics::softmax_rows(x) - numerics::softmax_rows(shifted)).cwiseAbs().maxCoeff(), 1e-12);
    const RowVector ls = numerics::log_softmax_row(x.row(0));
    EXPECT_NEAR(ls.array().exp().sum(), 1.0, 1e-12);
  }
}
