#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "crcda/gradcheck.hpp"
#include "crcda/model.hpp"
#include "test_util.hpp"

namespace crcda {
namespace {

ModelConfig cr_config() {
  ModelConfig c;
  c.cr_classes = {12, 20};
  return c;
}

Tensor<float> random_images(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return test::random_tensor<float>({n, 3, 64, 128}, rng, 0.0, 1.0);
}

TEST(Model, OutputShapes) {
  Model<float> m(cr_config(), 1);
  Tape<float> t;
  auto f = m.extract_features(t, t.constant(random_images(2, 3)));
  EXPECT_EQ(f.shape(), (Shape{2, 32, 16, 32}));
  auto p = m.predict_pixel(t, f);
  EXPECT_EQ(p.shape(), (Shape{2, 8, 64, 128}));
  auto c1 = m.predict_cr(t, f, 0);
  auto c2 = m.predict_cr(t, f, 1);
  EXPECT_EQ(c1.shape(), (Shape{2, 12, 8, 8}));
  EXPECT_EQ(c2.shape(), (Shape{2, 20, 4, 4}));
  auto L = m.build_layout_map(p, {c1, c2});
  EXPECT_EQ(L.shape(), (Shape{2, 8 + 12 + 20, 64, 128}));
  auto d = m.predict_domain(t, L);
  EXPECT_EQ(d.shape(), (Shape{2, 1, 16, 32}));
  for (float v : d.value().data()) EXPECT_TRUE(v > 0.f && v < 1.f);
}

TEST(Model, HeadsAreNormalised) {
  Model<double> m(cr_config(), 2);
  Tape<double> t;
  std::mt19937_64 rng(9);
  auto f = m.extract_features(t, t.constant(test::random_tensor<double>({1, 3, 64, 128}, rng, 0, 1)));
  for (auto p : {m.predict_pixel(t, f), m.predict_cr(t, f, 0), m.predict_cr(t, f, 1)}) {
    const auto& v = p.value();
    const std::size_t C = v.dim(1), hw = v.dim(2) * v.dim(3);
    for (std::size_t i = 0; i < hw; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += v[c * hw + i];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Model, ZeroInputGivesUniformPixelPrediction) {
  // With zero bias every pre-activation is zero, so the softmax is uniform.
  Model<double> m(cr_config(), 5);
  Tape<double> t;
  auto p = m.predict_pixel(t, m.extract_features(t, t.constant(Tensor<double>({1, 3, 64, 128}))));
  for (double v : p.value().data()) EXPECT_NEAR(v, 1.0 / 8.0, 1e-15);
}

TEST(Model, ParameterBudget) {
  Model<float> m(cr_config(), 0);
  EXPECT_LT(m.num_parameters(), 200000u);
  // E: 3*32*9+32 + 2*(32*32*9+32); Cseg: 32*8+8; Ccr: 32*12+12 + 32*20+20; CD: 40*32*9+32 + 32*32*9+32 + 32+1
  const std::size_t expect = (864 + 32) + 2 * (9216 + 32) + (256 + 8) + (384 + 12) + (640 + 20) +
                             (11520 + 32) + (9216 + 32) + (32 + 1);
  EXPECT_EQ(m.num_parameters(), expect);
}

TEST(Model, GroupStreamsIndependentOfHeads) {
  ModelConfig plain;
  Model<float> a(plain, 42), b(cr_config(), 42);
  for (const auto& [name, t] : a.E()) EXPECT_EQ(t, b.E().at(name)) << name;
  for (const auto& [name, t] : a.Cseg()) EXPECT_EQ(t, b.Cseg().at(name)) << name;
  EXPECT_EQ(a.Ccr(0).size(), 0u);
  EXPECT_EQ(a.CD().at("conv1.weight").dim(1), 8u);
  EXPECT_EQ(b.CD().at("conv1.weight").dim(1), 40u);
}

TEST(Model, DifferentSeedsDiffer) {
  Model<float> a(ModelConfig{}, 1), b(ModelConfig{}, 2), c(ModelConfig{}, 1);
  EXPECT_FALSE(a.E().at("conv1.weight") == b.E().at("conv1.weight"));
  EXPECT_EQ(a.E().at("conv1.weight"), c.E().at("conv1.weight"));
}

TEST(Model, HeInitialisationScale) {
  Model<double> m(ModelConfig{}, 11);
  const auto& w = m.E().at("conv2.weight");
  double ss = 0;
  for (double v : w.data()) ss += v * v;
  const double var = ss / static_cast<double>(w.size());
  EXPECT_NEAR(var, 2.0 / (32 * 9), 0.1 * 2.0 / (32 * 9));
}

TEST(Model, RejectsBadShapesAndConfigs) {
  Model<float> m(ModelConfig{}, 0);
  Tape<float> t;
  EXPECT_THROW(m.extract_features(t, t.constant(Tensor<float>({1, 3, 60, 128}))), ContractViolation);
  auto f = m.extract_features(t, t.constant(Tensor<float>({1, 3, 64, 128})));
  EXPECT_THROW(m.predict_cr(t, f, 0), ContractViolation);
  ModelConfig bad;
  bad.stride = 2;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = cr_config();
  bad.regions[0] = {6, 16};
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(Model, CastPreservesValues) {
  Model<float> m(cr_config(), 3);
  auto d = m.cast<double>();
  EXPECT_EQ(d.config(), m.config());
  EXPECT_EQ(d.num_parameters(), m.num_parameters());
  const auto& a = m.CD().at("conv1.weight");
  const auto& b = d.CD().at("conv1.weight");
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(static_cast<double>(a[i]), b[i]);
}

TEST(Model, FullStackGradientMatchesFiniteDifferences) {
  ModelConfig c;
  c.height = 16;
  c.width = 32;
  c.feature_channels = 4;
  c.domain_channels = 3;
  c.cr_classes = {3, 2};
  c.regions = {{{8, 8}, {8, 16}}};
  Model<double> m(c, 4);
  std::mt19937_64 rng(1);
  const auto x = test::random_tensor<double>({1, 3, 16, 32}, rng, 0, 1);
  // Probe the first E weight through every head at once.
  ScalarFn<double> f = [&](Tape<double>& t, Var<double> w) {
    auto h = relu(conv2d(t.constant(x), w, t.param(m.E().at("conv1.bias")), 2));
    h = relu(conv2d(h, t.param(m.E().at("conv2.weight")), t.param(m.E().at("conv2.bias")), 1));
    auto feat = relu(conv2d(h, t.param(m.E().at("conv3.weight")), t.param(m.E().at("conv3.bias")), 2));
    auto p = m.predict_pixel(t, feat);
    auto L = m.build_layout_map(p, {m.predict_cr(t, feat, 0), m.predict_cr(t, feat, 1)});
    return sum(mul(m.predict_domain(t, L), m.predict_domain(t, L)));
  };
  auto rep = finite_diff_check<double>(f, m.E().at("conv1.weight"), 1e-6, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(StackImages, LaysOutBatchContiguously) {
  Tensor<float> a({3, 2, 2}), b({3, 2, 2});
  for (std::size_t i = 0; i < 12; ++i) {
    a[i] = static_cast<float>(i);
    b[i] = static_cast<float>(100 + i);
  }
  auto s = stack_images<double>({&a, &b});
  EXPECT_EQ(s.shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(s[5], 5.0);
  EXPECT_EQ(s[12 + 7], 107.0);
}

}  // namespace
}  // namespace crcda
