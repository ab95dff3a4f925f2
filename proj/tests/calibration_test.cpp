#include <gtest/gtest.h>

#include "crcda/config.hpp"
#include "crcda/metrics.hpp"
#include "crcda/train.hpp"

namespace crcda {
namespace {

// Full-length source-only run on the default data with the desk preset. The
// supervised task is easy by construction, so the source split must be nearly solved.
TEST(Calibration, SourceOnlySolvesTheSourceSplit) {
  RunConfig rc;
  load_run_config(CRCDA_DESK_CONFIG, rc);
  ASSERT_EQ(rc.train.max_iter, 3000u);
  rc.train.mode = Mode::kSourceOnly;
  rc.train.eval_every = 0;
  const auto data = Dataset::generate(rc.data);
  Trainer t(rc.train, rc.model, data, nullptr);
  t.run(rc.train.max_iter);
  const auto src = evaluate(t.model(), data, Split::kSourceTrain);
  EXPECT_GT(src.miou, 0.9);
  // Road, building, sky and vegetation are large bands and should be near perfect.
  for (std::size_t c : {0u, 2u, 3u, 7u}) EXPECT_GT(*src.per_class_iou.at(c), 0.95) << c;
  EXPECT_EQ(data.target_train_label_reads(), 0u);
}

}  // namespace
}  // namespace crcda
