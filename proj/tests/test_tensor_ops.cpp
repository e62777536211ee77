#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "scn/gradcheck.hpp"
#include "scn/ops.hpp"
#include "scn/rng.hpp"

using scn::Tensor;
using TD = Tensor<double>;

namespace {

std::vector<double> random_values(std::size_t n, scn::CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

TD random_tensor(scn::Shape shape, scn::CounterRng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  const auto n = scn::shape_numel(shape);
  return TD::from_data(std::move(shape), random_values(n, rng, lo, hi), grad);
}

// Projects an arbitrary-shaped output to a scalar with fixed random weights.
TD project(const TD& out, std::uint64_t seed) {
  scn::CounterRng rng(seed, 99);
  return scn::sum(scn::mul(out, random_tensor(out.shape(), rng, false)));
}

double worst_error(const std::function<TD()>& fn, std::vector<TD> params, double h = 1e-5) {
  return scn::gradient_check(fn, std::span<TD>(params), h, 1e-5).worst();
}

}  // namespace

// ----------------------------------------------------------------------------
// Tensor basics

TEST(Tensor, FromDataChecksExtentsAndSize) {
  EXPECT_THROW(TD::from_data({2, 2}, {1, 2, 3}), scn::DimensionError);
  EXPECT_THROW(TD::from_data({0, 2}, {}), scn::DimensionError);
  const auto t = TD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, BackwardAccumulatesThroughSharedInputs) {
  auto x = TD::from_data({2}, {3.0, -2.0}, true);
  auto y = scn::sum(scn::add(scn::mul(x, x), x));  // sum x^2 + x
  y.backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  scn::NoGradGuard guard;
  auto y = scn::sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, CastRoundTrip) {
  const auto x = TD::from_data({3}, {0.5, -1.25, 2.0});
  const auto f = x.cast<float>();
  EXPECT_EQ(f.shape(), x.shape());
  EXPECT_FLOAT_EQ(f[1], -1.25f);
}

// ----------------------------------------------------------------------------
// conv2d

TEST(Conv2d, IdentityOneByOne) {
  const auto x = TD::from_data({1, 1, 1, 1}, {5.0});
  const auto k = TD::from_data({1, 1, 1, 1}, {1.0});
  const auto b = TD::from_data({1}, {0.0});
  const auto y = scn::conv2d(x, k, b, 1);
  EXPECT_EQ(y.shape(), (scn::Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 5.0);
}

TEST(Conv2d, AllOnesKernelOnThreeByThree) {
  const auto x = TD::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto k = TD::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
  const auto b = TD::from_data({1}, {0.0});
  const auto y = scn::conv2d(x, k, b, 1);
  ASSERT_EQ(y.shape(), (scn::Shape{1, 1, 2, 2}));
  const std::vector<double> expected{12, 16, 24, 28};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], expected[i]);
}

TEST(Conv2d, OutputShapeFormula) {
  const auto x = Tensor<float>::zeros({2, 3, 64, 64});
  const auto k = Tensor<float>::zeros({32, 3, 8, 8});
  const auto b = Tensor<float>::zeros({32});
  EXPECT_EQ(scn::conv2d(x, k, b, 4).shape(), (scn::Shape{2, 32, 15, 15}));
}

TEST(Conv2d, Errors) {
  const auto x = TD::zeros({1, 2, 4, 4});
  EXPECT_THROW(scn::conv2d(x, TD::zeros({1, 2, 2, 2}), TD::zeros({1}), 0), scn::ArgumentError);
  EXPECT_THROW(scn::conv2d(x, TD::zeros({1, 2, 2, 2}), TD::zeros({1}), -1), scn::ArgumentError);
  EXPECT_THROW(scn::conv2d(x, TD::zeros({1, 3, 2, 2}), TD::zeros({1}), 1), scn::DimensionError);
  EXPECT_THROW(scn::conv2d(x, TD::zeros({1, 2, 5, 5}), TD::zeros({1}), 1), scn::DimensionError);
  EXPECT_THROW(scn::conv2d(x, TD::zeros({2, 2, 2, 2}), TD::zeros({1}), 1), scn::DimensionError);
  EXPECT_THROW(scn::conv2d(TD::zeros({2, 4, 4}), TD::zeros({1, 2, 2, 2}), TD::zeros({1}), 1), scn::DimensionError);
}

TEST(Conv2d, MatchesSevenLoopReferenceExactly) {
  scn::CounterRng rng(21, 0);
  struct Case {
    std::size_t n, c, h, w, f, kh, kw, s;
  };
  const std::vector<Case> cases{{1, 1, 3, 3, 1, 2, 2, 1}, {2, 3, 8, 8, 5, 3, 3, 1}, {2, 3, 8, 8, 4, 4, 4, 2},
                                {1, 2, 8, 7, 7, 2, 3, 3}, {2, 3, 8, 8, 9, 8, 8, 1}, {2, 1, 5, 8, 3, 1, 1, 2},
                                {2, 3, 8, 8, 17, 2, 2, 2}, {1, 3, 6, 6, 1, 5, 5, 1}};
  for (const auto& c : cases) {
    const auto xv = random_values(c.n * c.c * c.h * c.w, rng);
    const auto kv = random_values(c.f * c.c * c.kh * c.kw, rng);
    const auto bv = random_values(c.f, rng);
    const auto y = scn::conv2d(TD::from_data({c.n, c.c, c.h, c.w}, xv), TD::from_data({c.f, c.c, c.kh, c.kw}, kv),
                               TD::from_data({c.f}, bv), static_cast<int>(c.s));
    const auto ref = oracle::conv2d(xv, c.n, c.c, c.h, c.w, kv, c.f, c.kh, c.kw, bv, c.s);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(y[i], ref[i]) << "case f=" << c.f << " index " << i;
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  scn::CounterRng rng(22, 0);
  auto x = random_tensor({2, 2, 6, 5}, rng);
  auto k = random_tensor({3, 2, 3, 2}, rng);
  auto b = random_tensor({3}, rng);
  for (int stride : {1, 2}) {
    EXPECT_LT(worst_error([&] { return project(scn::conv2d(x, k, b, stride), 1); }, {x, k, b}), 1e-5);
  }
}

// ----------------------------------------------------------------------------
// bilinear

TEST(Bilinear, Examples) {
  const auto e1 = TD::from_data({2}, {1, 0});
  EXPECT_EQ(scn::bilinear(e1, TD::from_data({2, 2}, {1, 0, 0, 1}), e1).item(), 1.0);
  const auto a = TD::from_data({2}, {1, 2});
  const auto b = TD::from_data({2}, {3, 4});
  EXPECT_EQ(scn::bilinear(a, TD::zeros({2, 2}), b).item(), 0.0);
  EXPECT_EQ(scn::bilinear(a, TD::from_data({2, 2}, {1, 0, 0, 1}), b).item(), 11.0);
}

TEST(Bilinear, MatchesDoubleLoopAndGradients) {
  scn::CounterRng rng(23, 0);
  auto a = random_tensor({4}, rng);
  auto w = random_tensor({4, 4}, rng);
  auto b = random_tensor({4}, rng);
  const auto value = scn::bilinear(a, w, b).item();
  EXPECT_NEAR(value, oracle::bilinear({a.data().begin(), a.data().end()}, {w.data().begin(), w.data().end()},
                                      {b.data().begin(), b.data().end()}),
              1e-12);
  EXPECT_LT(worst_error([&] { return scn::bilinear(a, w, b); }, {a, w, b}), 1e-5);
}

TEST(Bilinear, ExtentMismatch) {
  EXPECT_THROW(scn::bilinear(TD::zeros({2}), TD::zeros({3, 3}), TD::zeros({2})), scn::DimensionError);
  EXPECT_THROW(scn::bilinear(TD::zeros({2}), TD::zeros({2, 2}), TD::zeros({3})), scn::DimensionError);
}

// ----------------------------------------------------------------------------
// nce_loss / cross entropy

TEST(NceLoss, Examples) {
  for (std::size_t n : {1u, 2u, 5u, 64u}) {
    const auto scores = TD::zeros({n});
    EXPECT_NEAR(scn::nce_loss(scores, 0).item(), std::log(static_cast<double>(n)), 1e-12);
  }
  EXPECT_EQ(scn::nce_loss(TD::from_data({1}, {3.7}), 0).item(), 0.0);
  EXPECT_NEAR(scn::nce_loss(TD::from_data({2}, {1.0, 0.0}), 0).item(), 0.313262, 1e-6);
  EXPECT_NEAR(scn::nce_loss(TD::from_data({2}, {1.0, 0.0}), 0).item(), std::log1p(std::exp(-1.0)), 1e-15);
}

TEST(NceLoss, TargetOutOfRange) {
  EXPECT_THROW(scn::nce_loss(TD::zeros({3}), 3), scn::ArgumentError);
  const std::vector<std::size_t> targets{0, 2};
  EXPECT_THROW(scn::cross_entropy_rows(TD::zeros({2, 2}), std::span<const std::size_t>(targets)), scn::ArgumentError);
}

TEST(NceLoss, NonNegativeShiftInvariantAndMatchesOracle) {
  scn::CounterRng rng(24, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    const auto values = random_values(n, rng, -5.0, 5.0);
    const std::size_t t = rng.below(n);
    const double loss = scn::nce_loss(TD::from_data({n}, values), t).item();
    EXPECT_GE(loss, 0.0);
    EXPECT_NEAR(loss, oracle::nce(values, t), 1e-12);
    const double shift = rng.uniform(-50.0, 50.0);
    auto shifted = values;
    for (auto& v : shifted) v += shift;
    EXPECT_NEAR(scn::nce_loss(TD::from_data({n}, shifted), t).item(), loss, 1e-9);
  }
}

TEST(NceLoss, LargeScoresStayFinite) {
  const auto loss = scn::nce_loss(TD::from_data({3}, {1000.0, 999.0, -1000.0}), 1).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 1.0 + std::log1p(std::exp(-1.0)), 1e-9);
  EXPECT_NEAR(scn::nce_loss(TD::from_data({2}, {60.0, 0.0}), 0).item(), 0.0, 1e-20);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  scn::CounterRng rng(25, 0);
  auto scores = random_tensor({4, 5}, rng, -2.0, 2.0);
  const std::vector<std::size_t> targets{0, 3, 4, 1};
  EXPECT_LT(worst_error([&] { return scn::cross_entropy_rows(scores, std::span<const std::size_t>(targets)); }, {scores}),
            1e-5);
}

// ----------------------------------------------------------------------------
// remaining differentiable ops

TEST(Ops, ForwardValues) {
  const auto a = TD::from_data({2, 2}, {1, 2, 3, 4});
  const auto b = TD::from_data({2, 2}, {5, 6, 7, 8});
  const auto m = scn::matmul(a, b);
  EXPECT_EQ(std::vector<double>(m.data().begin(), m.data().end()), (std::vector<double>{19, 22, 43, 50}));
  const auto l = scn::linear(a, b, TD::from_data({2}, {1, -1}));  // a b^T + bias
  EXPECT_EQ(std::vector<double>(l.data().begin(), l.data().end()), (std::vector<double>{18, 22, 40, 52}));
  const auto r = scn::relu(TD::from_data({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
  const auto t = scn::transpose01(TD::from_data({2, 3, 1}, {0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(t.shape(), (scn::Shape{3, 2, 1}));
  EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), (std::vector<double>{0, 3, 1, 4, 2, 5}));
  const auto bi = scn::batched_inner(TD::from_data({1, 2, 2}, {1, 0, 0, 1}), TD::from_data({1, 1, 2}, {3, 4}));
  EXPECT_EQ(bi.shape(), (scn::Shape{1, 2, 1}));
  EXPECT_EQ(bi[0], 3.0);
  EXPECT_EQ(bi[1], 4.0);
  EXPECT_EQ(scn::mean(a).item(), 2.5);
  const std::vector<double> targets{1, 2, 3, 6};
  EXPECT_EQ(scn::mse(a, std::span<const double>(targets)).item(), 1.0);
}

TEST(Ops, ShapeErrors) {
  EXPECT_THROW(scn::matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), scn::DimensionError);
  EXPECT_THROW(scn::linear(TD::zeros({2, 3}), TD::zeros({4, 2}), TD::zeros({4})), scn::DimensionError);
  EXPECT_THROW(scn::reshape(TD::zeros({2, 3}), {4}), scn::DimensionError);
  EXPECT_THROW(scn::add(TD::zeros({2}), TD::zeros({3})), scn::DimensionError);
  EXPECT_THROW(scn::batched_inner(TD::zeros({2, 2, 3}), TD::zeros({2, 2, 4})), scn::DimensionError);
  EXPECT_THROW(scn::grouped_linear(TD::zeros({2, 2, 3}), TD::zeros({3, 1, 3}), TD::zeros({3, 1})), scn::DimensionError);
}

TEST(Ops, GradientsMatchFiniteDifferences) {
  scn::CounterRng rng(26, 0);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({5, 4}, rng);
  auto bias = random_tensor({5}, rng);
  auto m = random_tensor({4, 2}, rng);
  auto t3 = random_tensor({2, 3, 4}, rng);
  auto u3 = random_tensor({2, 5, 4}, rng);
  auto gw = random_tensor({3, 2, 4}, rng);
  auto gb = random_tensor({3, 2}, rng);
  auto gx = random_tensor({2, 3, 4}, rng);
  // Keep relu inputs away from the kink.
  std::vector<double> rv = random_values(12, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < rv.size(); i += 2) rv[i] = -rv[i];
  auto rx = TD::from_data({3, 4}, rv, true);
  const std::vector<double> targets = random_values(12, rng);

  EXPECT_LT(worst_error([&] { return project(scn::linear(x, w, bias), 2); }, {x, w, bias}), 1e-5);
  EXPECT_LT(worst_error([&] { return project(scn::matmul(x, m), 3); }, {x, m}), 1e-5);
  EXPECT_LT(worst_error([&] { return project(scn::transpose01(t3), 4); }, {t3}), 1e-5);
  EXPECT_LT(worst_error([&] { return project(scn::batched_inner(t3, u3), 5); }, {t3, u3}), 1e-5);
  EXPECT_LT(worst_error([&] { return project(scn::grouped_linear(gx, gw, gb), 6); }, {gx, gw, gb}), 1e-5);
  EXPECT_LT(worst_error([&] { return project(scn::relu(rx), 7); }, {rx}), 1e-5);
  EXPECT_LT(worst_error([&] { return project(scn::reshape(x, {2, 6}), 8); }, {x}), 1e-5);
  EXPECT_LT(worst_error([&] { return scn::mse(x, std::span<const double>(targets)); }, {x}), 1e-5);
  EXPECT_LT(worst_error([&] { return scn::mean(scn::mul(x, rx)); }, {x, rx}), 1e-5);
  EXPECT_LT(worst_error([&] { return scn::sum(scn::scale(scn::add(x, rx), 1.7)); }, {x, rx}), 1e-5);
}

TEST(Ops, OutputsFiniteOnFiniteInputs) {
  scn::CounterRng rng(27, 0);
  auto scores = random_tensor({3, 4}, rng, -300.0, 300.0);
  const std::vector<std::size_t> targets{0, 1, 2};
  EXPECT_TRUE(std::isfinite(scn::cross_entropy_rows(scores, std::span<const std::size_t>(targets)).item()));
}

// ----------------------------------------------------------------------------
// gradient_check itself

TEST(GradientCheck, LinearFunctionIsExactToRoundoff) {
  auto x = TD::from_data({3}, {0.3, -1.2, 2.0}, true);
  const auto c = TD::from_data({3}, {1.5, -2.0, 0.25});
  const auto report = scn::gradient_check([&] { return scn::sum(scn::mul(c, x)); }, std::span<TD>(&x, 1), 1e-4, 1e-6);
  EXPECT_LT(report.worst(), 1e-9);
  EXPECT_TRUE(report.passed());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], c[i]);
}

TEST(GradientCheck, ConstantLossGivesZeroGradients) {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  const auto report =
      scn::gradient_check([&] { return scn::add(scn::scale(scn::sum(x), 0.0), TD::scalar(4.0)); }, std::span<TD>(&x, 1),
                          1e-4, 1e-6);
  EXPECT_EQ(report.worst(), 0.0);
}

TEST(GradientCheck, NonFiniteLossIsRejected) {
  auto x = TD::from_data({1}, {1.0}, true);
  EXPECT_THROW(scn::gradient_check([&] { return scn::scale(scn::sum(x), std::numeric_limits<double>::infinity()); },
                                   std::span<TD>(&x, 1), 1e-4, 1e-6),
               scn::NumericError);
}

TEST(GradientCheck, StepsAcrossAReluKinkAreSkipped) {
  // relu(x) at x = 0 and x = 5e-5 with h = 1e-4: both steps change the sign pattern.
  auto x = TD::from_data({3}, {0.0, 5e-5, 0.7}, true);
  const auto report =
      scn::gradient_check([&] { return scn::sum(scn::relu(x)); }, std::span<TD>(&x, 1), 1e-4, 1e-6, true);
  EXPECT_EQ(report.skipped, 2u);
  EXPECT_EQ(report.compared, 1u);
  EXPECT_TRUE(report.passed());
  const auto strict = scn::gradient_check([&] { return scn::sum(scn::relu(x)); }, std::span<TD>(&x, 1), 1e-4, 1e-6);
  EXPECT_EQ(strict.skipped, 0u);
  EXPECT_FALSE(strict.passed());
}

TEST(GradientCheck, WrongGradientIsCaught) {
  // x * stop_gradient(x): backward gives x, the true derivative is 2x
  auto x = TD::from_data({2}, {0.8, -1.5}, true);
  const auto bad = scn::gradient_check(
      [&] {
        TD detached = TD::from_data({2}, {x[0], x[1]});
        return scn::sum(scn::mul(x, detached));
      },
      std::span<TD>(&x, 1), 1e-4, 1e-3);
  EXPECT_FALSE(bad.passed());
  EXPECT_NEAR(bad.worst(), 1.0 / 3.0, 1e-6);
}
