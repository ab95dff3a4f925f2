// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "crcda/checkpoint.hpp"
#include "crcda/config.hpp"
#include "crcda/gradcheck.hpp"
#include "oracles.hpp"

using namespace crcda;
using namespace crcda::test;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// --- 1: finite differences on every loss ----------------------------------------

// Logits whose softmax keeps every AEMM clamp argument at least `gap` away from zero.
Tensor<double> aemm_logits(const Shape& s, double lR, std::mt19937_64& rng, double gap) {
  for (;;) {
    auto z = random_tensor<double>(s, rng, -2, 2);
    Tape<double> t;
    const auto p = softmax_channels(t.constant(z)).value();
    const std::size_t N = s[0], C = s[1], hw = s[2] * s[3];
    bool ok = true;
    for (std::size_t n = 0; n < N && ok; ++n)
      for (std::size_t i = 0; i < hw && ok; ++i) {
        double r = 0;
        for (std::size_t c = 0; c < C; ++c) r += ref_plogp(p[(n * C + c) * hw + i]);
        r *= lR / static_cast<double>(C);
        for (std::size_t c = 0; c < C; ++c) ok = ok && std::abs(ref_plogp(p[(n * C + c) * hw + i]) - r) > gap;
      }
    if (ok) return z;
  }
}

Outcome gradient_fidelity() {
  std::mt19937_64 rng(101);
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  auto record = [&](const char* name, const GradCheckReport& r) {
    ++checks;
    if (!r.passed || r.max_rel_error > worst) {
      worst = r.passed ? r.max_rel_error : INFINITY;
      worst_name = name;
    }
  };
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + rng() % 2, C = 2 + rng() % 3, H = 1 + rng() % 4, W = 1 + rng() % 8;
    const Shape s{N, C, H, W};
    std::vector<std::int32_t> labels(N * H * W);
    for (auto& v : labels) v = static_cast<std::int32_t>(rng() % C);

    const auto z = random_tensor<double>(s, rng, -2, 2);
    record("seg", finite_diff_check<double>(
                      [&](Tape<double>&, Var<double> x) { return seg_loss(softmax_channels(x), labels); }, z, 1e-6, 1e-4));
    record("cr", finite_diff_check<double>(
                     [&](Tape<double>&, Var<double> x) { return cr_loss(softmax_channels(x), labels); }, z, 1e-6, 1e-4));

    const double lR = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
    const auto za = aemm_logits(s, lR, rng, 1e-3);
    record("aemm", finite_diff_check<double>(
                       [&](Tape<double>&, Var<double> x) {
                         return aemm_entropy_loss(softmax_channels(x), lR, static_cast<double>(C));
                       },
                       za, 1e-7, 1e-4));
    record("minent", finite_diff_check<double>(
                         [&](Tape<double>&, Var<double> x) { return minent_loss(softmax_channels(x), static_cast<double>(C)); },
                         z, 1e-6, 1e-4));

    const auto ds = random_tensor<double>({N, 1, H, W}, rng, -2, 2);
    const auto dt = random_tensor<double>({N, 1, H, W}, rng, -2, 2);
    record("domain", finite_diff_check<double>(
                         [&](Tape<double>& t, Var<double> x) { return domain_loss(sigmoid(x), sigmoid(t.constant(dt))).total; },
                         ds, 1e-6, 1e-4));
    record("domain-game", finite_diff_check<double>(
                              [&](Tape<double>& t, Var<double> x) {
                                return domain_loss(sigmoid(t.constant(ds)), sigmoid(x)).game_value();
                              },
                              dt, 1e-6, 1e-4));
  }
  Outcome o;
  o.pass = worst < 1e-4;
  o.detail = std::to_string(checks) + " checks, max relative error " + fmt(worst) + " (" + worst_name + ")";
  return o;
}

// --- 2: gradient reversal is exact -----------------------------------------------

Outcome reversal_exactness() {
  std::mt19937_64 rng(202);
  std::size_t mismatches = 0, values = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{1 + rng() % 3, 1 + rng() % 4, 1 + rng() % 5, 1 + rng() % 6};
    Tensor<double> x = random_tensor<double>(s, rng, -3, 3);
    const auto up = random_tensor<double>(s, rng, -3, 3);
    const double lambda = std::uniform_real_distribution<double>(0, 2)(rng);
    x.set_requires_grad(true);
    Tape<double> t;
    t.backward(sum(mul(grad_reverse(t.param(x), lambda), t.constant(up))));
    for (std::size_t i = 0; i < x.size(); ++i, ++values)
      if (std::as_const(x).grad()[i] != -lambda * up[i]) ++mismatches;
  }
  return {mismatches == 0, std::to_string(values) + " gradient entries, " + std::to_string(mismatches) + " mismatches"};
}

// --- 3: AEMM against the loop reference -----------------------------------------

double tape_aemm(const Tensor<double>& p, double lR, double cn) {
  Tape<double> t;
  return aemm_entropy_loss(t.constant(p), lR, cn).value()[0];
}

Outcome aemm_oracle() {
  std::mt19937_64 rng(303);
  double worst = 0;
  for (double lR : {0.0, 0.25, 0.5, 0.75, 1.0})
    for (int i = 0; i < 1000; ++i) {
      const std::size_t C = 2 + rng() % 7;
      const auto p = random_simplex({1, C, 1, 1}, rng);
      worst = std::max(worst, std::abs(tape_aemm(p, lR, static_cast<double>(C)) - ref_aemm(p, lR, static_cast<double>(C))));
    }
  bool identities = true;
  for (std::size_t C = 2; C <= 8; ++C) {
    Tensor<double> u({2, C, 3, 4});
    std::fill(u.data().begin(), u.data().end(), 1.0 / static_cast<double>(C));
    identities = identities && tape_aemm(u, 1.0, static_cast<double>(C)) == 0.0;
    identities = identities && tape_aemm(random_simplex({2, C, 3, 4}, rng), 0.0, static_cast<double>(C)) == 0.0;
  }
  return {worst <= 1e-10 && identities,
          "5000 distributions, max abs difference " + fmt(worst) + ", boundary identities " + (identities ? "hold" : "broken")};
}

// --- 4: DBSCAN against the brute-force reference -------------------------------

Outcome dbscan_oracle() {
  std::mt19937_64 rng(404);
  int same = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 2 + static_cast<std::size_t>(trial % 3);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::normal_distribution<double> jitter(0.0, 0.4);
    std::vector<std::vector<double>> centres(4 + trial % 3, std::vector<double>(dim));
    for (auto& c : centres)
      for (auto& v : c) v = u(rng);
    std::vector<std::vector<double>> pts;
    PointSet ps;
    for (int i = 0; i < 200; ++i) {
      std::vector<double> x(dim);
      if (i % 8 == 7) {
        for (auto& v : x) v = u(rng);
      } else {
        const auto& c = centres[rng() % centres.size()];
        for (std::size_t d = 0; d < dim; ++d) x[d] = c[d] + jitter(rng);
      }
      pts.push_back(x);
      ps.push(x);
    }
    const double eps = 0.3 + 0.1 * (trial % 5);
    const std::size_t min_pts = 3 + static_cast<std::size_t>(trial % 4);
    if (same_partition(dbscan(ps, eps, min_pts), brute_dbscan(pts, eps, min_pts))) ++same;
  }
  return {same == 20, std::to_string(same) + "/20 point sets partitioned identically"};
}

// --- 5: schedules ------------------------------------------------------------------

Outcome schedules() {
  const AemmSchedule s{3000, 0.9};
  const double half = lambda_r(1500, s);
  const double lr0 = poly_lr(0, OptimizerConfig{}, 3000);
  const bool ok = lambda_r(0, s) == 1.0 && lambda_r(3000, s) == 0.0 && std::abs(half - 0.53589) <= 1e-5 && lr0 == 2.5e-4;
  return {ok, "lambda_r(0) " + fmt(lambda_r(0, s)) + ", lambda_r(max) " + fmt(lambda_r(3000, s)) + ", lambda_r(max/2) " +
                  fmt(half, 7) + ", poly_lr(0) " + fmt(lr0)};
}

// --- 6: adversarial sign wiring ---------------------------------------------------

Outcome wiring() {
  std::vector<std::string> failures;
  for (const auto& f : {wiring_full_mode, wiring_local_only, wiring_minent, wiring_global_only}) {
    auto got = f();
    failures.insert(failures.end(), got.begin(), got.end());
  }
  Outcome o{failures.empty(), "full, local, minent and global probes agree with finite differences"};
  if (!o.pass) o.detail = std::to_string(failures.size()) + " probe mismatches, first: " + failures.front();
  return o;
}

// --- shared fixtures for the training criteria -----------------------------------

struct Workload {
  Dataset data;
  CrLabelSet cr;
};

Workload small_workload() {
  DatasetSpec spec;
  spec.seed = 9;
  spec.num_source = 12;
  spec.num_target = 12;
  spec.num_eval = 4;
  auto data = Dataset::generate(spec);
  auto cr = build_source_cr_labels(data, CrConfig{});
  return {std::move(data), std::move(cr)};
}

RunConfig desk_preset() {
  RunConfig rc;
  load_run_config(CRCDA_DESK_CONFIG, rc);
  return rc;
}

// --- 7: ablation ordering ----------------------------------------------------------

std::size_t g_label_reads_in_ablation = 0;
bool g_ablation_ran = false;

Outcome ablation() {
  const auto rc = desk_preset();
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = Dataset::generate(rc.data);
  const auto cr = build_source_cr_labels(data, rc.crlabels);
  const std::vector<Mode> modes = {Mode::kSourceOnly, Mode::kMinEnt, Mode::kPixelAemm, Mode::kCrcdaStar, Mode::kCrcda};
  std::map<Mode, std::vector<double>> miou;
  double worst_set_minutes = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto s0 = std::chrono::steady_clock::now();
    for (Mode m : modes) {
      TrainConfig tc = rc.train;
      tc.mode = m;
      tc.seed = seed;
      Trainer t(tc, rc.model, data, &cr);
      t.run(tc.max_iter);
      const double v = 100.0 * t.evaluate_target().miou;
      miou[m].push_back(v);
      std::cout << "  seed " << seed << " " << std::setw(12) << std::left << to_string(m) << std::right << " target mIoU "
                << std::fixed << std::setprecision(2) << v << std::defaultfloat << std::endl;
    }
    worst_set_minutes =
        std::max(worst_set_minutes, std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count() / 60.0);
  }
  g_label_reads_in_ablation = data.target_train_label_reads();
  g_ablation_ran = true;

  auto avg = [&](Mode m) { return (miou[m][0] + miou[m][1] + miou[m][2]) / 3.0; };
  const double so = avg(Mode::kSourceOnly), star = avg(Mode::kCrcdaStar), full = avg(Mode::kCrcda);
  const double pix = avg(Mode::kPixelAemm), me = avg(Mode::kMinEnt);
  int pix_wins = 0;
  for (int i = 0; i < 3; ++i) pix_wins += miou[Mode::kPixelAemm][i] >= miou[Mode::kMinEnt][i];
  const bool order = full >= star && star >= so && full - so >= 5.0;
  const bool pixel = pix >= me || pix_wins >= 2;
  const bool budget = worst_set_minutes <= 45.0;
  std::ostringstream d;
  d << std::fixed << std::setprecision(2) << "source-only " << so << ", minent " << me << ", pixel-aemm " << pix
    << ", crcda-star " << star << ", crcda " << full << " (gain " << full - so << "); pixel-aemm >= minent on "
    << pix_wins << "/3 seeds; slowest seed set " << std::setprecision(1) << worst_set_minutes << " min, total "
    << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0 << " min";
  if (!order) d << "; ordering or gain not met";
  if (!pixel) d << "; pixel-aemm below minent";
  if (!budget) d << "; over the time budget";
  return {order && pixel && budget, d.str()};
}

// --- 8: no target label access -----------------------------------------------------

Outcome uda_contract() {
  auto w = small_workload();
  for (Mode m : kAllModes) {
    TrainConfig tc;
    tc.mode = m;
    tc.max_iter = 4;
    tc.eval_every = 2;
    Trainer t(tc, ModelConfig{}, w.data, &w.cr);
    t.run(tc.max_iter);
  }
  std::size_t reads = w.data.target_train_label_reads();
  std::string detail = "all 9 modes trained with " + std::to_string(reads) + " target-train label reads";
  if (g_ablation_ran) {
    reads += g_label_reads_in_ablation;
    detail += "; ablation runs read " + std::to_string(g_label_reads_in_ablation);
  }
  return {reads == 0, detail};
}

// --- 9: determinism and resume ---------------------------------------------------

Outcome determinism() {
  auto w = small_workload();
  TrainConfig tc;
  tc.mode = Mode::kCrcda;
  tc.max_iter = 8;
  tc.eval_every = 4;
  tc.seed = 17;
  auto csv = [&](Trainer& t, std::size_t until, std::string& out) {
    t.run(until, [&](const LossReport& r) { out += to_csv_row(r) + "\n"; });
  };
  std::string a, b, resumed;
  Trainer ta(tc, ModelConfig{}, w.data, &w.cr), tb(tc, ModelConfig{}, w.data, &w.cr);
  csv(ta, 8, a);
  csv(tb, 8, b);

  const auto path = std::filesystem::temp_directory_path() / ("crcda_accept_" + std::to_string(::getpid()) + ".bin");
  {
    Trainer first(tc, ModelConfig{}, w.data, &w.cr);
    csv(first, 3, resumed);
    save_checkpoint(path, make_checkpoint(first, json::object()));
  }
  auto ck = load_checkpoint(path);
  std::filesystem::remove(path);
  Trainer second(tc, ModelConfig{}, w.data, &w.cr);
  second.restore(ck.iter, std::move(ck.model), std::move(ck.optim), ck.rng());
  csv(second, 8, resumed);
  const bool same_state = serialize_checkpoint(make_checkpoint(second, json::object())) ==
                          serialize_checkpoint(make_checkpoint(ta, json::object()));
  const bool ok = a == b && resumed == a && same_state;
  return {ok, std::string("repeat run metrics ") + (a == b ? "identical" : "differ") + ", resumed metrics " +
                  (resumed == a ? "identical" : "differ") + ", final state " + (same_state ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},     {"gradient reversal exactness", reversal_exactness},
      {"AEMM oracle equivalence", aemm_oracle},     {"DBSCAN oracle equivalence", dbscan_oracle},
      {"schedule values", schedules},               {"adversarial sign wiring", wiring},
      {"directional ablation", ablation},           {"UDA contract", uda_contract},
      {"determinism and persistence", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << "): " << o.detail << " ["
              << std::fixed << std::setprecision(1) << secs << " s]" << std::defaultfloat << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
