#pragma once

// Training: one combined objective per step, min/max structure realised by
// gradient reversal, SGD with momentum under a polynomial learning rate.

#include <array>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crcda/crlabels.hpp"
#include "crcda/dataset.hpp"
#include "crcda/losses.hpp"
#include "crcda/metrics.hpp"
#include "crcda/model.hpp"
#include "crcda/optim.hpp"

namespace crcda {

enum class Mode {
  kSourceOnly,
  kMinEnt,
  kPixelAemm,
  kCrcdaStar,
  kGlobalAemm,
  kPixelCrcdaStar,
  kPixelGlobal,
  kCrcdaStarGlobal,
  kCrcda,
};

inline constexpr std::array<Mode, 9> kAllModes = {Mode::kSourceOnly,     Mode::kMinEnt,      Mode::kPixelAemm,
                                                  Mode::kCrcdaStar,      Mode::kGlobalAemm,  Mode::kPixelCrcdaStar,
                                                  Mode::kPixelGlobal,    Mode::kCrcdaStarGlobal, Mode::kCrcda};

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kSourceOnly: return "source-only";
    case Mode::kMinEnt: return "minent";
    case Mode::kPixelAemm: return "pixel-aemm";
    case Mode::kCrcdaStar: return "crcda-star";
    case Mode::kGlobalAemm: return "global-aemm";
    case Mode::kPixelCrcdaStar: return "pixel+crcda-star";
    case Mode::kPixelGlobal: return "pixel+global";
    case Mode::kCrcdaStarGlobal: return "crcda-star+global";
    case Mode::kCrcda: return "crcda";
  }
  return "";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : kAllModes)
    if (to_string(m) == s) return m;
  std::string all;
  for (Mode m : kAllModes) all += (all.empty() ? "" : ", ") + to_string(m);
  throw ConfigError("unknown mode '" + s + "' (expected one of: " + all + ")");
}

/// Which loss terms a mode switches on.
struct ModeTerms {
  bool cr = false;      // supervised region heads on source
  bool local = false;   // region-scale entropy max-min on target
  bool pixel = false;   // pixel-scale entropy max-min on target
  bool minent = false;  // plain entropy minimisation on target
  bool global = false;  // domain classifier on layout maps
};

inline ModeTerms terms_of(Mode m) {
  switch (m) {
    case Mode::kSourceOnly: return {};
    case Mode::kMinEnt: return {.minent = true};
    case Mode::kPixelAemm: return {.pixel = true};
    case Mode::kCrcdaStar: return {.cr = true, .local = true};
    case Mode::kGlobalAemm: return {.global = true};
    case Mode::kPixelCrcdaStar: return {.cr = true, .local = true, .pixel = true};
    case Mode::kPixelGlobal: return {.pixel = true, .global = true};
    case Mode::kCrcdaStarGlobal: return {.cr = true, .local = true, .global = true};
    case Mode::kCrcda: return {.cr = true, .local = true, .pixel = true, .global = true};
  }
  return {};
}

/// Normaliser of the region entropy loss: the pixel class count, or the head's own cluster count.
enum class CrNorm { kClasses, kClusters };

struct TrainConfig {
  Mode mode = Mode::kCrcda;
  std::size_t max_iter = 3000;
  std::size_t batch_source = 2;
  std::size_t batch_target = 2;
  LossWeights weights;
  OptimizerConfig optim;
  double aemm_power = 0.9;
  CrNorm cr_norm = CrNorm::kClasses;
  std::uint64_t seed = 0;
  std::size_t eval_every = 500;  // 0: evaluate only after the last step
  std::size_t eval_batch = 10;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  validate(c.weights);
  validate(c.optim);
  if (c.batch_source == 0 || c.batch_target == 0) throw ConfigError("train: batch sizes must be positive");
  if (!(c.aemm_power > 0)) throw ConfigError("train: aemm_power must be positive");
  if (c.eval_batch == 0) throw ConfigError("train: eval_batch must be positive");
}

/// One optimisation step's inputs.
template <class T>
struct StepBatch {
  Tensor<T> xs;  // [Ns,3,H,W]
  Tensor<T> xt;  // [Nt,3,H,W]
  std::vector<std::int32_t> ys;
  std::array<std::vector<std::int32_t>, 2> ycr;
};

template <class T>
struct StepGraph {
  Var<T> objective;
  std::optional<Var<T>> seg, cr, ent_pix, ent_cr, domain;
};

/// Records the combined objective of one step.
///
///   J = L_seg
///     + lambda_cr  * sum_k L_cr,k                               (cr)
///     - lambda_ent * sum_k L_ent_cr,k( C_cr,k(GRL(F_t)) )       (local)
///     - lambda_ent * L_ent_pix( C_seg(GRL(F_t)) )               (pixel)
///     + lambda_ent * MinEnt( C_seg(F_t) )                       (minent)
///     - lambda_D   * V( C_D(GRL(layout_s)), C_D(GRL(layout_t)) ) (global)
///
/// Heads after a reversal descend -L_ent, i.e. maximise entropy, while E gets
/// the reversed gradient and minimises it. V is the log-likelihood form of the
/// domain loss; C_D ascends it and everything upstream of the layout descends it.
template <class T>
StepGraph<T> build_objective(Tape<T>& t, Model<T>& m, Mode mode, const LossWeights& w, CrNorm cr_norm,
                             const StepBatch<T>& b, double lambda_R) {
  const ModeTerms mt = terms_of(mode);
  const auto& mc = m.config();
  if (mt.cr && !mc.has_cr())
    throw ConfigError("mode " + to_string(mode) + " needs contextual-relation labels; run make-crlabels first");
  const T C = static_cast<T>(mc.num_classes);
  const T lR = static_cast<T>(lambda_R);
  StepGraph<T> g;

  auto fs = m.extract_features(t, t.constant(b.xs));
  auto ps = m.predict_pixel(t, fs);
  g.seg = seg_loss(ps, std::span<const std::int32_t>(b.ys));
  Var<T> J = *g.seg;

  std::vector<Var<T>> pcr_s;
  if (mt.cr) {
    for (std::size_t k = 0; k < 2; ++k) pcr_s.push_back(m.predict_cr(t, fs, k));
    g.cr = add(cr_loss(pcr_s[0], std::span<const std::int32_t>(b.ycr[0])),
               cr_loss(pcr_s[1], std::span<const std::int32_t>(b.ycr[1])));
    J = add(J, scale(*g.cr, static_cast<T>(w.lambda_cr)));
  }

  if (!(mt.local || mt.pixel || mt.minent || mt.global)) {
    g.objective = J;
    return g;
  }

  auto ft = m.extract_features(t, t.constant(b.xt));
  std::optional<Var<T>> ft_rev;
  if (mt.local || mt.pixel) ft_rev = grad_reverse(ft, T(1));

  if (mt.pixel) {
    g.ent_pix = aemm_entropy_loss(m.predict_pixel(t, *ft_rev), lR, C);
    J = add(J, scale(*g.ent_pix, static_cast<T>(-w.lambda_ent)));
  }
  if (mt.minent) {
    g.ent_pix = minent_loss(m.predict_pixel(t, ft), C);
    J = add(J, scale(*g.ent_pix, static_cast<T>(w.lambda_ent)));
  }
  if (mt.local) {
    std::array<Var<T>, 2> e;
    for (std::size_t k = 0; k < 2; ++k) {
      const T norm = cr_norm == CrNorm::kClasses ? C : static_cast<T>(mc.cr_classes[k]);
      e[k] = aemm_entropy_loss(m.predict_cr(t, *ft_rev, k), lR, norm);
    }
    g.ent_cr = add(e[0], e[1]);
    J = add(J, scale(*g.ent_cr, static_cast<T>(-w.lambda_ent)));
  }
  if (mt.global) {
    std::vector<Var<T>> pcr_t;
    if (mt.cr)
      for (std::size_t k = 0; k < 2; ++k) pcr_t.push_back(m.predict_cr(t, ft, k));
    auto ls = m.build_layout_map(ps, pcr_s);
    auto lt = m.build_layout_map(m.predict_pixel(t, ft), pcr_t);
    auto ds = m.predict_domain(t, grad_reverse(ls, T(1)));
    auto dt = m.predict_domain(t, grad_reverse(lt, T(1)));
    const auto terms = domain_loss(ds, dt);
    g.domain = terms.total;
    J = add(J, scale(terms.game_value(), static_cast<T>(-w.lambda_D)));
  }
  g.objective = J;
  return g;
}

/// One row of metrics.csv.
struct LossReport {
  std::size_t iter = 0;  // steps completed
  double lr = 0.0;
  double lambda_r = 0.0;
  std::optional<double> loss_seg, loss_cr, loss_ent_pix, loss_ent_cr, loss_D, target_miou;
  double objective = 0.0;

  bool all_finite() const {
    for (const auto& v : {loss_seg, loss_cr, loss_ent_pix, loss_ent_cr, loss_D, target_miou})
      if (v && !std::isfinite(*v)) return false;
    return std::isfinite(objective) && std::isfinite(lr) && std::isfinite(lambda_r);
  }
};

inline const char* kMetricsHeader = "iter,lr,lambda_r,loss_seg,loss_cr,loss_ent_pix,loss_ent_cr,loss_D,target_miou";

inline std::string to_csv_row(const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(9);
  auto opt = [&](const std::optional<double>& v) {
    os << ',';
    if (v) os << *v;
  };
  os << r.iter << ',' << r.lr << ',' << r.lambda_r;
  opt(r.loss_seg);
  opt(r.loss_cr);
  opt(r.loss_ent_pix);
  opt(r.loss_ent_cr);
  opt(r.loss_D);
  opt(r.target_miou);
  return os.str();
}

/// Builds the model configuration for a mode: region heads exist only when the
/// mode uses them, so C_D's input width follows the mode as well.
inline ModelConfig model_config_for(const TrainConfig& tc, ModelConfig base, const SceneConfig& scene,
                                    const CrLabelSet* cr) {
  base.height = scene.height;
  base.width = scene.width;
  base.num_classes = scene.num_classes;
  base.cr_classes = {0, 0};
  if (terms_of(tc.mode).cr) {
    if (!cr) throw ConfigError("mode " + to_string(tc.mode) + " needs crlabels.json; run make-crlabels first");
    for (std::size_t k = 0; k < 2; ++k) {
      base.cr_classes[k] = cr->heads[k].num_clusters;
      base.regions[k] = cr->heads[k].size;
    }
  }
  validate(base);
  return base;
}

/// Contextual-relation labels for the source-train split.
inline CrLabelSet build_source_cr_labels(const Dataset& data, const CrConfig& cfg) {
  TrainingView view(data);
  std::vector<LabelMap> maps;
  maps.reserve(view.source_size());
  for (std::size_t i = 0; i < view.source_size(); ++i) maps.push_back(view.source_label(i));
  return build_cr_labels(std::span<const LabelMap>(maps), cfg, data.scene().num_classes);
}

/// Training loop state: parameters, momentum, sampler RNG and step counter.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const ModelConfig& base, const Dataset& data, const CrLabelSet* cr)
      : cfg_(cfg), data_(&data), view_(data), cr_(cr) {
    validate(cfg_);
    mcfg_ = model_config_for(cfg_, base, data.scene(), cr);
    if (terms_of(cfg_.mode).cr) {
      if (cr_->num_images() != view_.source_size())
        throw ConfigError("crlabels.json covers " + std::to_string(cr_->num_images()) + " source images but the dataset has " +
                          std::to_string(view_.source_size()));
      if (cr_->height != mcfg_.height || cr_->width != mcfg_.width)
        throw ConfigError("crlabels.json was built for a different image size");
    }
    if (view_.source_size() == 0 || view_.target_size() == 0)
      throw ConfigError("training needs non-empty source-train and target-train splits");
    model_ = Model<float>(mcfg_, cfg_.seed);
    rng_.seed(cfg_.seed ^ 0xC0FFEEull);
  }

  const TrainConfig& config() const { return cfg_; }
  const ModelConfig& model_config() const { return mcfg_; }
  Model<float>& model() { return model_; }
  OptimizerState<float>& optimizer() { return opt_; }
  std::mt19937_64& rng() { return rng_; }
  std::size_t iter() const { return iter_; }

  /// Restores state saved from a run with the same configuration.
  void restore(std::size_t iter, Model<float> model, OptimizerState<float> opt, const std::mt19937_64& rng) {
    require(model.config() == mcfg_, "restore: model configuration differs");
    iter_ = iter;
    model_ = std::move(model);
    opt_ = std::move(opt);
    rng_ = rng;
  }

  /// Draws the next batch; indices depend only on the sampler state.
  StepBatch<float> next_batch() {
    std::uniform_int_distribution<std::size_t> ds(0, view_.source_size() - 1), dt(0, view_.target_size() - 1);
    std::vector<std::size_t> si(cfg_.batch_source), ti(cfg_.batch_target);
    for (auto& i : si) i = ds(rng_);
    for (auto& i : ti) i = dt(rng_);
    StepBatch<float> b;
    std::vector<const Tensor<float>*> xs, xt;
    std::vector<const LabelMap*> ys;
    for (auto i : si) {
      xs.push_back(&view_.source_image(i));
      ys.push_back(&view_.source_label(i));
    }
    for (auto i : ti) xt.push_back(&view_.target_image(i));
    b.xs = stack_images<float>(xs);
    b.xt = stack_images<float>(xt);
    b.ys = flatten_labels(ys);
    if (mcfg_.has_cr())
      for (std::size_t k = 0; k < 2; ++k)
        for (auto i : si) {
          const auto& grid = cr_->heads[k].grids[i];
          b.ycr[k].insert(b.ycr[k].end(), grid.begin(), grid.end());
        }
    return b;
  }

  /// One optimisation step. Target mIoU is filled in on evaluation steps.
  LossReport step() {
    const std::size_t it = iter_;
    const double lr = poly_lr(it, cfg_.optim, cfg_.max_iter);
    const double lR = lambda_r(it, {cfg_.max_iter, cfg_.aemm_power});
    auto batch = next_batch();
    model_.zero_grad();
    Tape<float> tape;
    auto g = build_objective(tape, model_, cfg_.mode, cfg_.weights, cfg_.cr_norm, batch, lR);
    tape.backward(g.objective);
    auto groups = model_.groups();
    sgd_step(groups, opt_, lr, cfg_.optim);
    ++iter_;

    LossReport r;
    r.iter = iter_;
    r.lr = lr;
    r.lambda_r = lR;
    auto val = [](const std::optional<Var<float>>& v) -> std::optional<double> {
      if (!v) return std::nullopt;
      return static_cast<double>(v->value()[0]);
    };
    r.loss_seg = val(g.seg);
    r.loss_cr = val(g.cr);
    r.loss_ent_pix = val(g.ent_pix);
    r.loss_ent_cr = val(g.ent_cr);
    r.loss_D = val(g.domain);
    r.objective = g.objective.value()[0];
    if (iter_ == cfg_.max_iter || (cfg_.eval_every > 0 && iter_ % cfg_.eval_every == 0)) r.target_miou = evaluate_target().miou;
    if (!r.all_finite()) throw PipelineError("non-finite loss at step " + std::to_string(iter_));
    return r;
  }

  MetricsReport evaluate_target() {
    auto rep = evaluate(model_, *data_, Split::kTargetEval, cfg_.eval_batch);
    rep.mode = to_string(cfg_.mode);
    return rep;
  }

  /// Steps until `until` iterations are done (capped at max_iter).
  void run(std::size_t until, const std::function<void(const LossReport&)>& on_row = {}) {
    until = std::min(until, cfg_.max_iter);
    while (iter_ < until) {
      const auto r = step();
      if (on_row) on_row(r);
    }
  }

 private:
  TrainConfig cfg_;
  ModelConfig mcfg_;
  const Dataset* data_;
  TrainingView view_;
  const CrLabelSet* cr_;
  Model<float> model_;
  OptimizerState<float> opt_;
  std::mt19937_64 rng_;
  std::size_t iter_ = 0;
};

}  // namespace crcda
