#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "crcda/train.hpp"
#include "oracles.hpp"

namespace crcda {
namespace {

using namespace test;

void expect_none(const std::vector<std::string>& failures) {
  for (const auto& f : failures) ADD_FAILURE() << f;
}

TEST(Wiring, FullModeSignsMatchFiniteDifferences) { expect_none(wiring_full_mode()); }

TEST(Wiring, LocalOnlyMode) { expect_none(wiring_local_only()); }

TEST(Wiring, MinEntHasNoReversal) { expect_none(wiring_minent()); }

TEST(Wiring, GlobalModeUsesPixelLayoutOnly) { expect_none(wiring_global_only()); }

TEST(Wiring, SourceOnlyLeavesAuxiliaryHeadsUntouched) {
  Model<double> m(tiny_config(), 7);
  const auto b = tiny_batch(15);
  const auto g = objective_grads(m, Mode::kSourceOnly, LossWeights{}, b, 1.0);
  for (const auto& [key, v] : g)
    if (key.starts_with("Ccr") || key.starts_with("CD")) {
      for (double x : v) EXPECT_EQ(x, 0.0) << key;
    }
  // Target images play no role.
  auto b2 = b;
  for (auto& v : b2.xt.data()) v = 0.5;
  EXPECT_EQ(objective_grads(m, Mode::kSourceOnly, LossWeights{}, b2, 1.0), g);
}

TEST(Wiring, CrModeWithoutHeadsIsAConfigError) {
  ModelConfig c = tiny_config();
  c.cr_classes = {0, 0};
  Model<double> m(c, 1);
  Tape<double> t;
  EXPECT_THROW(build_objective(t, m, Mode::kCrcda, LossWeights{}, CrNorm::kClasses, tiny_batch(1), 1.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Modes and metrics rows.

TEST(Modes, RoundTripAndTerms) {
  for (Mode m : kAllModes) EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_THROW(parse_mode("crcda++"), ConfigError);
  EXPECT_TRUE(terms_of(Mode::kCrcda).cr && terms_of(Mode::kCrcda).local && terms_of(Mode::kCrcda).pixel &&
              terms_of(Mode::kCrcda).global);
  EXPECT_FALSE(terms_of(Mode::kGlobalAemm).cr);
  EXPECT_TRUE(terms_of(Mode::kMinEnt).minent);
  EXPECT_FALSE(terms_of(Mode::kPixelGlobal).local);
}

TEST(MetricsRow, EmptyFieldsForInactiveTerms) {
  LossReport r;
  r.iter = 3;
  r.lr = 0.5;
  r.lambda_r = 0.25;
  r.loss_seg = 1.5;
  EXPECT_EQ(to_csv_row(r), "3,0.5,0.25,1.5,,,,,");
  EXPECT_EQ(std::string(kMetricsHeader), "iter,lr,lambda_r,loss_seg,loss_cr,loss_ent_pix,loss_ent_cr,loss_D,target_miou");
}

// ---------------------------------------------------------------------------
// Trainer on a small generated dataset.

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    DatasetSpec spec;
    spec.seed = 21;
    spec.num_source = 8;
    spec.num_target = 8;
    spec.num_eval = 4;
    data_ = new Dataset(Dataset::generate(spec));
    cr_ = new CrLabelSet(build_source_cr_labels(*data_, CrConfig{}));
  }
  static void TearDownTestSuite() {
    delete cr_;
    delete data_;
  }

  static TrainConfig quick(Mode m) {
    TrainConfig c;
    c.mode = m;
    c.max_iter = 4;
    c.eval_every = 0;
    c.seed = 9;
    return c;
  }

  static Dataset* data_;
  static CrLabelSet* cr_;
};

Dataset* TrainerTest::data_ = nullptr;
CrLabelSet* TrainerTest::cr_ = nullptr;

template <class T>
bool same_params(const ParamGroup<T>& a, const ParamGroup<T>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a)
    if (!(t == b.at(name))) return false;
  return true;
}

TEST_F(TrainerTest, RunsAndLogsEveryStep) {
  Trainer tr(quick(Mode::kCrcda), ModelConfig{}, *data_, cr_);
  std::vector<LossReport> rows;
  tr.run(100, [&](const LossReport& r) { rows.push_back(r); });
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rows[i].iter, i + 1);
    EXPECT_TRUE(rows[i].loss_seg && rows[i].loss_cr && rows[i].loss_ent_pix && rows[i].loss_ent_cr && rows[i].loss_D);
    EXPECT_EQ(rows[i].target_miou.has_value(), i == 3);
  }
  EXPECT_DOUBLE_EQ(rows[0].lr, 2.5e-4);
  EXPECT_DOUBLE_EQ(rows[0].lambda_r, 1.0);
  EXPECT_EQ(data_->target_train_label_reads(), 0u);
}

TEST_F(TrainerTest, SameSeedIsBitwiseDeterministic) {
  Trainer a(quick(Mode::kCrcda), ModelConfig{}, *data_, cr_), b(quick(Mode::kCrcda), ModelConfig{}, *data_, cr_);
  std::vector<std::string> ra, rb;
  a.run(4, [&](const LossReport& r) { ra.push_back(to_csv_row(r)); });
  b.run(4, [&](const LossReport& r) { rb.push_back(to_csv_row(r)); });
  EXPECT_EQ(ra, rb);
  auto ga = a.model().groups();
  auto gb = b.model().groups();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(same_params(*ga[i], *gb[i])) << i;
}

TEST_F(TrainerTest, ZeroWeightsReduceToSourceOnly) {
  auto cfg = quick(Mode::kCrcda);
  cfg.weights = {.lambda_cr = 0, .lambda_ent = 0, .lambda_D = 0};
  Trainer full(cfg, ModelConfig{}, *data_, cr_);
  Trainer base(quick(Mode::kSourceOnly), ModelConfig{}, *data_, nullptr);
  full.run(4);
  base.run(4);
  EXPECT_TRUE(same_params(full.model().E(), base.model().E()));
  EXPECT_TRUE(same_params(full.model().Cseg(), base.model().Cseg()));
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  Trainer whole(quick(Mode::kCrcda), ModelConfig{}, *data_, cr_);
  whole.run(4);
  Trainer first(quick(Mode::kCrcda), ModelConfig{}, *data_, cr_);
  first.run(2);
  Trainer second(quick(Mode::kCrcda), ModelConfig{}, *data_, cr_);
  second.restore(first.iter(), first.model(), first.optimizer(), first.rng());
  second.run(4);
  auto a = whole.model().groups();
  auto b = second.model().groups();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(same_params(*a[i], *b[i])) << i;
}

TEST_F(TrainerTest, CrModeNeedsLabels) {
  EXPECT_THROW(Trainer(quick(Mode::kCrcdaStar), ModelConfig{}, *data_, nullptr), ConfigError);
  // Non-CR modes build a model without region heads.
  Trainer t(quick(Mode::kPixelGlobal), ModelConfig{}, *data_, cr_);
  EXPECT_FALSE(t.model_config().has_cr());
  EXPECT_EQ(t.model().CD().at("conv1.weight").dim(1), kNumClasses);
}

TEST_F(TrainerTest, EvaluationMatchesStandaloneEvaluate) {
  Trainer tr(quick(Mode::kPixelAemm), ModelConfig{}, *data_, nullptr);
  LossReport last;
  tr.run(4, [&](const LossReport& r) { last = r; });
  ASSERT_TRUE(last.target_miou);
  EXPECT_EQ(*last.target_miou, evaluate(tr.model(), *data_, Split::kTargetEval).miou);
}

}  // namespace
}  // namespace crcda
