#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "crcda/gradcheck.hpp"
#include "crcda/losses.hpp"
#include "oracles.hpp"

namespace crcda {
namespace {

using namespace crcda::test;

double eval_aemm(const Tensor<double>& p, double lR, double cn) {
  Tape<double> t;
  return aemm_entropy_loss(t.constant(p), lR, cn).value()[0];
}

Tensor<double> column(std::vector<double> v) {
  Tensor<double> t({1, v.size(), 1, 1});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

TEST(Regularizer, TwoClassValue) {
  const std::vector<double> p{0.9, 0.1};
  EXPECT_NEAR(aemm_regularizer(p, 1.0), -0.16254, 1e-5);
  EXPECT_NEAR(aemm_regularizer(p, 1.0), (0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / 2, 1e-15);
  EXPECT_NEAR(aemm_regularizer(p, 0.5), 0.5 * aemm_regularizer(p, 1.0), 1e-15);
}

TEST(LambdaR, PolynomialDecay) {
  const AemmSchedule s{3000, 0.9};
  EXPECT_DOUBLE_EQ(lambda_r(0, s), 1.0);
  EXPECT_NEAR(lambda_r(1500, s), 0.53589, 1e-5);
  EXPECT_NEAR(lambda_r(1500, s), std::pow(0.5, 0.9), 1e-15);
  EXPECT_EQ(lambda_r(3000, s), 0.0);
  double prev = 2.0;
  for (std::size_t i = 0; i < 3000; i += 100) {
    EXPECT_LT(lambda_r(i, s), prev);
    prev = lambda_r(i, s);
  }
}

TEST(AemmLoss, SinglePositionValue) {
  const double v = eval_aemm(column({0.9, 0.1}), 1.0, 2.0);
  EXPECT_NEAR(v, -0.033858, 1e-6);
  // Only the dominant class survives the clamp.
  EXPECT_NEAR(v, -(0.9 * std::log(0.9) - aemm_regularizer(std::vector<double>{0.9, 0.1}, 1.0)) / 2, 1e-15);
}

TEST(AemmLoss, MatchesReferenceOnRandomMaps) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = test::random_simplex({2, 5, 3, 4}, rng);
    const double lR = std::uniform_real_distribution<double>(0, 1)(rng);
    EXPECT_NEAR(eval_aemm(p, lR, 5.0), ref_aemm(p, lR, 5.0), 1e-13);
  }
}

TEST(AemmLoss, UniformMapIsFullyClamped) {
  // Every P log P equals the channel mean m < 0, so P log P - lambda_R m = (1 - lambda_R) m < 0 is clamped away.
  Tensor<double> p({1, 4, 2, 2});
  std::fill(p.data().begin(), p.data().end(), 0.25);
  EXPECT_EQ(eval_aemm(p, 0.5, 4.0), 0.0);
  // At lambda_R = 1 the difference is exactly zero, including class counts where 1/C is inexact.
  for (std::size_t C = 2; C <= 9; ++C) {
    Tensor<double> u({2, C, 3, 2});
    std::fill(u.data().begin(), u.data().end(), 1.0 / static_cast<double>(C));
    EXPECT_EQ(eval_aemm(u, 1.0, static_cast<double>(C)), 0.0) << C;
  }
}

TEST(AemmLoss, ZeroLambdaIsPlainEntropyWithoutCancellation) {
  // lambda_R = 0 keeps max{P log P, 0} which is zero everywhere: nothing to maximise.
  std::mt19937_64 rng(5);
  auto p = test::random_simplex({1, 4, 2, 2}, rng);
  EXPECT_EQ(eval_aemm(p, 0.0, 4.0), 0.0);
}

TEST(AemmLoss, ShapeAlongPeakingFamily) {
  // Family (t, (1-t)/2, (1-t)/2) at lambda_R = 1. The loss is not monotone in t:
  // all three P log P tie at t = 0.5 and all vanish at t = 1, so it is zero at
  // both points and negative in between, with its minimum near t = 0.88.
  auto at = [](double t) { return eval_aemm(column({t, (1 - t) / 2, (1 - t) / 2}), 1.0, 3.0); };
  EXPECT_EQ(at(0.5), 0.0);
  EXPECT_EQ(at(1.0), 0.0);
  double prev = 0.0;
  for (double t : {0.6, 0.7, 0.8, 0.85, 0.88}) {
    EXPECT_LT(at(t), prev) << t;
    prev = at(t);
  }
  for (double t : {0.9, 0.95, 0.99}) {
    EXPECT_GT(at(t), prev) << t;
    prev = at(t);
  }
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) EXPECT_LE(eval_aemm(test::random_simplex({1, 6, 2, 2}, rng), 1.0, 6.0), 0.0);
}

TEST(AemmLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto p = test::random_simplex({2, 4, 3, 3}, rng, 0.05);
  ScalarFn<double> f = [](Tape<double>&, Var<double> x) { return aemm_entropy_loss(x, 0.7, 4.0); };
  auto rep = finite_diff_check<double>(f, p, 1e-7, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(AemmLoss, GradientThroughSoftmax) {
  std::mt19937_64 rng(9);
  auto z = test::random_tensor<double>({1, 6, 4, 4}, rng, -2, 2);
  ScalarFn<double> f = [](Tape<double>&, Var<double> x) { return aemm_entropy_loss(softmax_channels(x), 0.4, 6.0); };
  auto rep = finite_diff_check<double>(f, z, 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(MinEnt, ValueAndGradient) {
  Tape<double> t;
  const double v = minent_loss(t.constant(column({0.5, 0.25, 0.25})), 3.0).value()[0];
  EXPECT_NEAR(v, (0.5 * std::log(2.0) + 0.5 * std::log(4.0)) / 3.0, 1e-15);
  std::mt19937_64 rng(10);
  auto z = test::random_tensor<double>({2, 3, 2, 2}, rng, -2, 2);
  ScalarFn<double> f = [](Tape<double>&, Var<double> x) { return minent_loss(softmax_channels(x), 3.0); };
  auto rep = finite_diff_check<double>(f, z, 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(SegLoss, MeanNegativeLogLikelihood) {
  Tensor<double> p({1, 3, 1, 2});
  // position 0: (0.7, 0.2, 0.1), position 1: (0.1, 0.1, 0.8)
  const double vals[] = {0.7, 0.1, 0.2, 0.1, 0.1, 0.8};
  for (int i = 0; i < 6; ++i) p[i] = vals[i];
  Tape<double> t;
  const std::vector<std::int32_t> y{0, 2};
  EXPECT_NEAR(seg_loss(t.constant(p), std::span<const std::int32_t>(y)).value()[0],
              -(std::log(0.7) + std::log(0.8)) / 2, 1e-15);
  const std::vector<std::int32_t> bad{0, 3};
  EXPECT_THROW(seg_loss(t.constant(p), std::span<const std::int32_t>(bad)), ContractViolation);
  const std::vector<std::int32_t> short_{0};
  EXPECT_THROW(cr_loss(t.constant(p), std::span<const std::int32_t>(short_)), ContractViolation);
}

TEST(SegLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  auto z = test::random_tensor<double>({2, 4, 2, 3}, rng, -2, 2);
  std::vector<std::int32_t> y(12);
  for (auto& v : y) v = static_cast<std::int32_t>(rng() % 4);
  ScalarFn<double> f = [&](Tape<double>&, Var<double> x) {
    return cr_loss(softmax_channels(x), std::span<const std::int32_t>(y));
  };
  auto rep = finite_diff_check<double>(f, z, 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(DomainLoss, ChanceLevelValue) {
  Tensor<double> half({2, 1, 3, 3});
  std::fill(half.data().begin(), half.data().end(), 0.5);
  Tape<double> t;
  auto r = domain_loss(t.constant(half), t.constant(half));
  EXPECT_NEAR(r.total.value()[0], 2.07944, 1e-5);
  EXPECT_NEAR(r.total.value()[0], 3 * std::log(2.0), 1e-14);
  EXPECT_NEAR(r.game_value().value()[0], -std::log(2.0), 1e-14);
}

TEST(DomainLoss, TermsMatchReference) {
  std::mt19937_64 rng(13);
  auto ds = test::random_tensor<double>({1, 1, 2, 3}, rng, 0.05, 0.95);
  auto dt = test::random_tensor<double>({1, 1, 2, 3}, rng, 0.05, 0.95);
  double bs = 0, bt = 0, es = 0, et = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    bs -= std::log(ds[i]);
    bt -= std::log(1 - dt[i]);
    es -= ds[i] * std::log(ds[i]);
    et -= dt[i] * std::log(dt[i]);
  }
  Tape<double> t;
  auto r = domain_loss(t.constant(ds), t.constant(dt));
  EXPECT_NEAR(r.bce_s.value()[0], bs / 6, 1e-14);
  EXPECT_NEAR(r.bce_t.value()[0], bt / 6, 1e-14);
  EXPECT_NEAR(r.ent_s.value()[0], es / 6, 1e-14);
  EXPECT_NEAR(r.ent_t.value()[0], et / 6, 1e-14);
  EXPECT_NEAR(r.game_value().value()[0], (-bs - bt + es + et) / 6, 1e-14);
}

TEST(DomainLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  auto zs = test::random_tensor<double>({1, 1, 2, 2}, rng, -2, 2);
  const auto zt = test::random_tensor<double>({1, 1, 2, 2}, rng, -2, 2);
  ScalarFn<double> f = [&](Tape<double>& t, Var<double> x) {
    return domain_loss(sigmoid(x), sigmoid(t.constant(zt))).total;
  };
  auto rep = finite_diff_check<double>(f, zs, 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
  ScalarFn<double> g = [&](Tape<double>& t, Var<double> x) {
    return domain_loss(sigmoid(t.constant(zs)), sigmoid(x)).game_value();
  };
  rep = finite_diff_check<double>(g, zt, 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(LossWeights, DefaultsAndValidation) {
  LossWeights w;
  EXPECT_EQ(w.lambda_cr, 5e-3);
  EXPECT_EQ(w.lambda_ent, 2.5e-5);
  EXPECT_EQ(w.lambda_D, 2.5e-5);
  w.lambda_ent = -1;
  EXPECT_THROW(validate(w), ConfigError);
}

}  // namespace
}  // namespace crcda
