#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cvadapt/aic.hpp"
#include "test_support.hpp"

namespace cvadapt {
namespace {

template <class F>
Eigen::MatrixXd numeric_grad(Eigen::MatrixXd& m, F&& value, double h = 1e-5) {
  Eigen::MatrixXd g(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double keep = m(i, j);
      m(i, j) = keep + h;
      double up = value();
      m(i, j) = keep - h;
      double down = value();
      m(i, j) = keep;
      g(i, j) = (up - down) / (2 * h);
    }
  return g;
}

double rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(a.norm() + b.norm(), 1e-12);
}

TEST(ReconstructionLoss, ZeroForPerfectReconstruction) {
  std::mt19937_64 rng(1);
  auto x = testing::gaussian(rng, 6, 5);
  auto r = reconstruction_loss(x, x);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.grad.isZero(0.0));
}

TEST(ReconstructionLoss, UnitVectorAgainstZero) {
  Eigen::MatrixXd x(1, 3), z = Eigen::MatrixXd::Zero(1, 3);
  x << 0, 1, 0;
  EXPECT_DOUBLE_EQ(reconstruction_loss(x, z).value, 1.0);
}

TEST(ReconstructionLoss, SumsOverRowsAndDims) {
  std::mt19937_64 rng(2);
  auto x = testing::gaussian(rng, 20, 16);
  auto y = testing::gaussian(rng, 20, 16);
  double expected = 0;
  for (Eigen::Index i = 0; i < 20; ++i)
    for (Eigen::Index j = 0; j < 16; ++j) expected += (x(i, j) - y(i, j)) * (x(i, j) - y(i, j));
  EXPECT_NEAR(reconstruction_loss(x, y).value, expected, 1e-10 * expected);
  EXPECT_THROW(reconstruction_loss(x, testing::gaussian(rng, 19, 16)), Error);
}

TEST(AicGrads, ReverterGradientFormula) {
  std::mt19937_64 rng(3);
  auto x = testing::unit_rows(rng, 5, 6);
  auto z = testing::unit_rows(rng, 5, 4);
  ReverterParams v{testing::gaussian(rng, 6, 4)};
  auto g = aic_grads(x, z, v);
  Eigen::MatrixXd xh = z * v.weight.transpose();
  EXPECT_TRUE(g.grad_reverter.isApprox(2.0 * (xh - x).transpose() * z, 1e-12));
  EXPECT_TRUE(g.grad_z.isApprox(2.0 * (xh - x) * v.weight, 1e-12));
}

TEST(AicGrads, MatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto x = testing::unit_rows(rng, 5, 6);
  AdapterParams w{Eigen::MatrixXd::Identity(4, 6) + 0.3 * testing::gaussian(rng, 4, 6), Arch::Plain};
  ReverterParams v{Eigen::MatrixXd::Identity(6, 4) + 0.3 * testing::gaussian(rng, 6, 4)};
  auto g = aic_grads(x, w, v);
  auto value = [&] { return aic_grads(x, w, v).value; };
  EXPECT_LT(rel_error(numeric_grad(w.weight, value), g.grad_adapter), 1e-6);
  EXPECT_LT(rel_error(numeric_grad(v.weight, value), g.grad_reverter), 1e-6);
}

TEST(AicGrads, ResidualMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = testing::unit_rows(rng, 7, 5);
  AdapterParams w{0.2 * testing::gaussian(rng, 5, 5), Arch::Residual};
  ReverterParams v{testing::gaussian(rng, 5, 5)};
  auto g = aic_grads(x, w, v);
  auto value = [&] { return aic_grads(x, w, v).value; };
  EXPECT_LT(rel_error(numeric_grad(w.weight, value), g.grad_adapter), 1e-6);
}

TEST(AicGrads, DescentOnReverterReducesLoss) {
  std::mt19937_64 rng(6);
  auto x = testing::unit_rows(rng, 40, 8);
  AdapterParams w{testing::gaussian(rng, 8, 8), Arch::Plain};
  ReverterParams v{Eigen::MatrixXd::Zero(8, 8)};
  auto z = adapt_rows(w, x).z;
  double prev = aic_grads(x, z, v).value;
  const double initial = prev;
  for (int step = 0; step < 500; ++step) {
    auto g = aic_grads(x, z, v);
    v.weight -= 0.005 * g.grad_reverter;
    double now = aic_grads(x, z, v).value;
    EXPECT_LE(now, prev + 1e-12);
    prev = now;
  }
  // W is invertible, so x = ||Wx|| W^{-1} z is recoverable up to the per-row
  // norm; a linear reverter gets most of the way.
  EXPECT_LT(prev, 0.5 * initial);
}

}  // namespace
}  // namespace cvadapt
