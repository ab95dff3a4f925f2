#pragma once

// Segmentation metrics and run comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crcda/dataset.hpp"
#include "crcda/json_util.hpp"
#include "crcda/model.hpp"

namespace crcda {

/// Rows are ground truth, columns prediction.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = kNumClasses) : classes(c), counts(c * c, 0) {}

  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * classes + pred]; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : counts) s += v;
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    require(o.classes == classes, "confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion_matrix(const LabelMap& pred, const LabelMap& gt, std::size_t classes = kNumClasses) {
  require(pred.height == gt.height && pred.width == gt.width, "confusion_matrix: prediction and ground truth differ in size");
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    require(gt.labels[i] < classes && pred.labels[i] < classes, "confusion_matrix: class id out of range");
    ++m.at(gt.labels[i], pred.labels[i]);
  }
  return m;
}

struct IouResult {
  std::vector<std::optional<double>> per_class;  // empty when absent from both gt and prediction
  double miou = 0.0;
  double pixel_accuracy = 0.0;
};

inline IouResult miou(const ConfusionMatrix& m) {
  const std::uint64_t total = m.total();
  if (total == 0) throw PipelineError("miou: confusion matrix is empty");
  IouResult r;
  double sum = 0.0, diag = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < m.classes; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < m.classes; ++k) {
      row += m.at(c, k);
      col += m.at(k, c);
    }
    const auto tp = m.at(c, c);
    diag += static_cast<double>(tp);
    if (row == 0 && col == 0) {
      r.per_class.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(row + col - tp);
    r.per_class.push_back(iou);
    sum += iou;
    ++present;
  }
  r.miou = sum / static_cast<double>(present);
  r.pixel_accuracy = diag / static_cast<double>(total);
  return r;
}

/// Per-pixel -sum_c P log P for one item of a [N,C,H,W] probability tensor.
template <class T>
std::vector<double> entropy_map(const Tensor<T>& p, std::size_t item = 0) {
  require(p.rank() == 4, "entropy_map: expected [N,C,H,W]");
  const std::size_t C = p.dim(1), hw = p.dim(2) * p.dim(3);
  std::vector<double> out(hw, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = static_cast<double>(p[(item * C + c) * hw + i]);
      if (v > 0.0) out[i] -= v * std::log(v);
    }
  return out;
}

/// Arg-max class per pixel (lowest index on ties).
template <class T>
LabelMap argmax_labels(const Tensor<T>& p, std::size_t item = 0) {
  const std::size_t C = p.dim(1), H = p.dim(2), W = p.dim(3), hw = H * W;
  LabelMap m(H, W);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (p[(item * C + c) * hw + i] > p[(item * C + best) * hw + i]) best = c;
    m.labels[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

struct MetricsReport {
  std::string mode;
  std::string checkpoint;
  std::string split;
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  double mean_entropy = 0.0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Runs E and C_seg over a split and scores the arg-max predictions.
template <class T>
MetricsReport evaluate(Model<T>& model, const Dataset& data, Split split, std::size_t batch = 10) {
  const std::size_t n = data.size(split);
  if (n == 0) throw PipelineError(std::string("evaluate: split ") + split_dir(split) + " is empty");
  ConfusionMatrix cm(model.config().num_classes);
  double ent = 0.0;
  std::size_t pixels = 0;
  for (std::size_t b0 = 0; b0 < n; b0 += batch) {
    const std::size_t b1 = std::min(n, b0 + batch);
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = b0; i < b1; ++i) imgs.push_back(&data.image(split, i));
    Tape<T> tape;
    auto x = tape.constant(stack_images<T>(imgs));
    const auto& p = model.predict_pixel(tape, model.extract_features(tape, x)).value();
    for (std::size_t i = b0; i < b1; ++i) {
      cm += confusion_matrix(argmax_labels(p, i - b0), data.label(split, i), model.config().num_classes);
      for (double e : entropy_map(p, i - b0)) ent += e;
      pixels += p.dim(2) * p.dim(3);
    }
  }
  const auto r = miou(cm);
  MetricsReport rep;
  rep.split = split_dir(split);
  rep.per_class_iou = r.per_class;
  rep.miou = r.miou;
  rep.pixel_accuracy = r.pixel_accuracy;
  rep.mean_entropy = ent / static_cast<double>(pixels);
  return rep;
}

inline json report_to_json(const MetricsReport& r) {
  json iou = json::array();
  for (const auto& v : r.per_class_iou) iou.push_back(v ? json(*v) : json(nullptr));
  return json{{"mode", r.mode},
              {"checkpoint", r.checkpoint},
              {"split", r.split},
              {"per_class_iou", iou},
              {"miou", r.miou},
              {"pixel_accuracy", r.pixel_accuracy},
              {"mean_entropy", r.mean_entropy}};
}

inline MetricsReport report_from_json(const json& j) {
  try {
    MetricsReport r;
    r.mode = j.at("mode").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.split = j.at("split").get<std::string>();
    for (const auto& v : j.at("per_class_iou"))
      r.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    r.miou = j.at("miou").get<double>();
    r.pixel_accuracy = j.at("pixel_accuracy").get<double>();
    r.mean_entropy = j.at("mean_entropy").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

struct ComparisonRow {
  std::string mode;
  std::string checkpoint;
  double miou = 0.0;
  double delta = 0.0;  // vs. the baseline
};

struct Comparison {
  std::string baseline;
  std::vector<ComparisonRow> rows;  // sorted by mIoU, best first

  std::string text() const {
    std::ostringstream os;
    os << std::left << std::setw(20) << "mode" << std::right << std::setw(10) << "mIoU" << std::setw(10) << "delta"
       << "  checkpoint\n";
    os << std::fixed << std::setprecision(2);
    for (const auto& r : rows)
      os << std::left << std::setw(20) << r.mode << std::right << std::setw(10) << 100.0 * r.miou << std::setw(10)
         << std::showpos << 100.0 * r.delta << std::noshowpos << "  " << r.checkpoint << '\n';
    os << "(delta vs. " << baseline << ", mIoU points)\n";
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "mode,checkpoint,miou,delta\n" << std::setprecision(10);
    for (const auto& r : rows) os << r.mode << ',' << r.checkpoint << ',' << r.miou << ',' << r.delta << '\n';
    return os.str();
  }
};

/// Sorts runs by mIoU (stable for ties) and reports deltas against the first
/// source-only run, or against the first input when there is none.
inline Comparison compare_modes(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw ConfigError("compare_modes: need at least two reports");
  auto base = std::find_if(reports.begin(), reports.end(), [](const auto& r) { return r.mode == "source-only"; });
  if (base == reports.end()) base = reports.begin();
  Comparison c;
  c.baseline = base->mode;
  for (const auto& r : reports) c.rows.push_back({r.mode, r.checkpoint, r.miou, r.miou - base->miou});
  std::stable_sort(c.rows.begin(), c.rows.end(), [](const auto& a, const auto& b) { return a.miou > b.miou; });
  return c;
}

}  // namespace crcda
