#pragma once

// Paired source/target datasets: generation, on-disk layout and label-access policy.
//
//   root/manifest.json
//   root/source/train/img_00000.bin, lbl_00000.bin, ...
//   root/target/train/...   (labels written, flagged eval-only)
//   root/target/eval/...

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/json_util.hpp"
#include "crcda/parallel.hpp"
#include "crcda/scene.hpp"
#include "crcda/tensor_io.hpp"

namespace crcda {

inline constexpr int kDatasetVersion = 1;

enum class Split : std::size_t { kSourceTrain = 0, kTargetTrain = 1, kTargetEval = 2 };
inline constexpr std::array<Split, 3> kAllSplits = {Split::kSourceTrain, Split::kTargetTrain, Split::kTargetEval};

inline const char* split_dir(Split s) {
  switch (s) {
    case Split::kSourceTrain: return "source/train";
    case Split::kTargetTrain: return "target/train";
    case Split::kTargetEval: return "target/eval";
  }
  return "";
}

inline Split parse_split(const std::string& s) {
  if (s == "source-train") return Split::kSourceTrain;
  if (s == "target-train") return Split::kTargetTrain;
  if (s == "target-eval") return Split::kTargetEval;
  throw ConfigError("unknown split '" + s + "' (expected source-train, target-train or target-eval)");
}

// --- JSON for scene types -------------------------------------------------

inline void to_json(json& j, const SceneConfig& c) {
  j = json{{"height", c.height},
           {"width", c.width},
           {"num_classes", c.num_classes},
           {"cell", c.cell},
           {"sky_rows_min", c.sky_rows_min},
           {"sky_rows_max", c.sky_rows_max},
           {"road_start_min", c.road_start_min},
           {"road_start_max", c.road_start_max},
           {"sidewalk_rows", c.sidewalk_rows},
           {"segment_width_min", c.segment_width_min},
           {"segment_width_max", c.segment_width_max},
           {"cars_min", c.cars_min},
           {"cars_max", c.cars_max},
           {"poles_min", c.poles_min},
           {"poles_max", c.poles_max},
           {"persons_min", c.persons_min},
           {"persons_max", c.persons_max}};
}

inline void from_json(const json& j, SceneConfig& c) {
  const std::string w = "scene";
  detail::reject_unknown_keys(j,
                              {"height", "width", "num_classes", "cell", "sky_rows_min", "sky_rows_max",
                               "road_start_min", "road_start_max", "sidewalk_rows", "segment_width_min",
                               "segment_width_max", "cars_min", "cars_max", "poles_min", "poles_max", "persons_min",
                               "persons_max"},
                              w);
  detail::read_opt(j, "height", c.height, w);
  detail::read_opt(j, "width", c.width, w);
  detail::read_opt(j, "num_classes", c.num_classes, w);
  detail::read_opt(j, "cell", c.cell, w);
  detail::read_opt(j, "sky_rows_min", c.sky_rows_min, w);
  detail::read_opt(j, "sky_rows_max", c.sky_rows_max, w);
  detail::read_opt(j, "road_start_min", c.road_start_min, w);
  detail::read_opt(j, "road_start_max", c.road_start_max, w);
  detail::read_opt(j, "sidewalk_rows", c.sidewalk_rows, w);
  detail::read_opt(j, "segment_width_min", c.segment_width_min, w);
  detail::read_opt(j, "segment_width_max", c.segment_width_max, w);
  detail::read_opt(j, "cars_min", c.cars_min, w);
  detail::read_opt(j, "cars_max", c.cars_max, w);
  detail::read_opt(j, "poles_min", c.poles_min, w);
  detail::read_opt(j, "poles_max", c.poles_max, w);
  detail::read_opt(j, "persons_min", c.persons_min, w);
  detail::read_opt(j, "persons_max", c.persons_max, w);
}

inline void to_json(json& j, const DomainParams& p) {
  json pal = json::array();
  for (const auto& c : p.palette) pal.push_back({c[0], c[1], c[2]});
  j = json{{"palette", pal},
           {"gamma", p.gamma},
           {"noise_sigma", p.noise_sigma},
           {"texture_amplitude", p.texture_amplitude},
           {"texture_frequency", p.texture_frequency}};
}

inline void from_json(const json& j, DomainParams& p) {
  const std::string w = "domain";
  detail::reject_unknown_keys(j, {"palette", "gamma", "noise_sigma", "texture_amplitude", "texture_frequency"}, w);
  if (j.contains("palette")) {
    const auto& pal = j.at("palette");
    if (!pal.is_array() || pal.size() != kNumClasses) throw FormatError("domain palette must have one colour per class");
    for (std::size_t i = 0; i < kNumClasses; ++i) p.palette[i] = pal[i].get<Color>();
  }
  detail::read_opt(j, "gamma", p.gamma, w);
  detail::read_opt(j, "noise_sigma", p.noise_sigma, w);
  detail::read_opt(j, "texture_amplitude", p.texture_amplitude, w);
  detail::read_opt(j, "texture_frequency", p.texture_frequency, w);
}

// --- generation -------------------------------------------------------------

struct DatasetSpec {
  SceneConfig scene;
  std::uint64_t seed = 0;
  std::size_t num_source = 200;
  std::size_t num_target = 200;
  std::size_t num_eval = 50;
  ShiftKind shift = ShiftKind::kAll;
};

/// Per-sample seed derivation (splitmix64 finaliser over the combined key).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ull) ^ (index * 0xBF58476D1CE4E5B9ull);
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct SplitInfo {
  std::string domain;
  std::string split;
  bool labels_eval_only = false;
  std::vector<std::string> images;
  std::vector<std::string> labels;
};

struct DatasetManifest {
  int version = kDatasetVersion;
  std::uint64_t seed = 0;
  ShiftKind shift = ShiftKind::kAll;
  SceneConfig scene;
  DomainParams source_params;
  DomainParams target_params;
  std::array<SplitInfo, 3> splits;

  const SplitInfo& split(Split s) const { return splits[static_cast<std::size_t>(s)]; }
};

inline json manifest_to_json(const DatasetManifest& m) {
  json splits = json::object();
  for (Split s : kAllSplits) {
    const auto& info = m.split(s);
    json samples = json::array();
    for (std::size_t i = 0; i < info.images.size(); ++i)
      samples.push_back({{"image", info.images[i]}, {"label", info.labels[i]}});
    splits[split_dir(s)] = {{"domain", info.domain},
                            {"split", info.split},
                            {"labels_eval_only", info.labels_eval_only},
                            {"count", info.images.size()},
                            {"samples", samples}};
  }
  return json{{"format", "crcda-dataset"},
              {"version", m.version},
              {"seed", m.seed},
              {"shift", to_string(m.shift)},
              {"scene", m.scene},
              {"source_params", m.source_params},
              {"target_params", m.target_params},
              {"splits", splits}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  try {
    if (j.value("format", "") != "crcda-dataset") throw FormatError("manifest: not a crcda dataset");
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kDatasetVersion)
      throw FormatError("manifest: version " + std::to_string(m.version) + " unsupported (expected " +
                        std::to_string(kDatasetVersion) + ")");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.shift = parse_shift(j.at("shift").get<std::string>());
    m.scene = j.at("scene").get<SceneConfig>();
    m.source_params = j.at("source_params").get<DomainParams>();
    m.target_params = j.at("target_params").get<DomainParams>();
    for (Split s : kAllSplits) {
      const auto& js = j.at("splits").at(split_dir(s));
      SplitInfo& info = m.splits[static_cast<std::size_t>(s)];
      info.domain = js.at("domain").get<std::string>();
      info.split = js.at("split").get<std::string>();
      info.labels_eval_only = js.at("labels_eval_only").get<bool>();
      for (const auto& smp : js.at("samples")) {
        info.images.push_back(smp.at("image").get<std::string>());
        info.labels.push_back(smp.at("label").get<std::string>());
      }
      if (js.at("count").get<std::size_t>() != info.images.size())
        throw FormatError(std::string("manifest: sample count mismatch in ") + split_dir(s));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

/// Image + label samples of the three splits, loaded lazily when opened from disk.
///
/// Target-train labels exist only for offline inspection. Every read of one is
/// counted; training code goes through TrainingView, which cannot reach them.
class Dataset {
 public:
  static Dataset generate(const DatasetSpec& spec) {
    validate(spec.scene);
    Dataset d;
    d.manifest_.seed = spec.seed;
    d.manifest_.shift = spec.shift;
    d.manifest_.scene = spec.scene;
    d.manifest_.source_params = source_domain();
    d.manifest_.target_params = target_domain(spec.shift);
    const std::array<std::size_t, 3> counts = {spec.num_source, spec.num_target, spec.num_eval};
    for (Split s : kAllSplits) {
      auto& info = d.manifest_.splits[static_cast<std::size_t>(s)];
      info.domain = s == Split::kSourceTrain ? "source" : "target";
      info.split = s == Split::kTargetEval ? "eval" : "train";
      info.labels_eval_only = s != Split::kSourceTrain;
      auto& slot = d.slots_[static_cast<std::size_t>(s)];
      slot.resize(counts[static_cast<std::size_t>(s)]);
      for (std::size_t i = 0; i < slot.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%05zu.bin", i);
        info.images.push_back(std::string(split_dir(s)) + "/" + name);
        std::snprintf(name, sizeof name, "lbl_%05zu.bin", i);
        info.labels.push_back(std::string(split_dir(s)) + "/" + name);
      }
    }

    struct Job {
      Split split;
      std::size_t index;
    };
    std::vector<Job> jobs;
    for (Split s : kAllSplits)
      for (std::size_t i = 0; i < d.slots_[static_cast<std::size_t>(s)].size(); ++i) jobs.push_back({s, i});

    // Train splits share the layout stream, so source i and target i have the same label map.
    auto run = [&](const Job& job) {
      const bool eval = job.split == Split::kTargetEval;
      const bool source = job.split == Split::kSourceTrain;
      const auto layout_seed = derive_seed(spec.seed, eval ? 1 : 0, job.index);
      const auto render_seed = derive_seed(spec.seed, source ? 2 : (eval ? 4 : 3), job.index);
      LabelMap lbl = generate_scene(layout_seed, spec.scene);
      RenderedImage img = render_domain(lbl, source ? d.manifest_.source_params : d.manifest_.target_params, render_seed);
      auto& e = d.slots_[static_cast<std::size_t>(job.split)][job.index];
      e.image = std::move(img);
      e.label = std::move(lbl);
    };
    parallel_for(jobs.size(), [&](std::size_t k) { run(jobs[k]); });
    return d;
  }

  /// Writes the manifest and every tensor under `root`.
  void write(const std::filesystem::path& root) const {
    namespace fs = std::filesystem;
    for (Split s : kAllSplits) fs::create_directories(root / split_dir(s));
    const Shape img_shape{3, manifest_.scene.height, manifest_.scene.width};
    const Shape lbl_shape{manifest_.scene.height, manifest_.scene.width};
    for (Split s : kAllSplits) {
      const auto& info = manifest_.split(s);
      for (std::size_t i = 0; i < info.images.size(); ++i) {
        write_tensor_file<float>(root / info.images[i], img_shape, load_image(s, i).data());
        write_tensor_file<std::uint8_t>(root / info.labels[i], lbl_shape, std::span(load_label(s, i).labels));
      }
    }
    std::ofstream os(root / "manifest.json", std::ios::trunc);
    if (!os) throw FormatError("cannot write " + (root / "manifest.json").string());
    os << manifest_to_json(manifest_).dump(2) << '\n';
  }

  /// Opens a dataset directory, validating the manifest and every referenced file header.
  static Dataset open(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const fs::path mpath = root / "manifest.json";
    std::ifstream is(mpath);
    if (!is) throw FormatError("missing manifest " + mpath.string());
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
    }
    Dataset d;
    d.root_ = root;
    d.manifest_ = manifest_from_json(j);
    validate(d.manifest_.scene);
    const Shape img_shape{3, d.manifest_.scene.height, d.manifest_.scene.width};
    const Shape lbl_shape{d.manifest_.scene.height, d.manifest_.scene.width};
    for (Split s : kAllSplits) {
      const auto& info = d.manifest_.split(s);
      d.slots_[static_cast<std::size_t>(s)].resize(info.images.size());
      for (std::size_t i = 0; i < info.images.size(); ++i) {
        for (const auto& [rel, shape, dtype] :
             {std::tuple{info.images[i], img_shape, DType::kF32}, std::tuple{info.labels[i], lbl_shape, DType::kU8}}) {
          const fs::path p(rel);
          if (p.is_absolute() || rel.find("..") != std::string::npos)
            throw FormatError("sample " + std::to_string(i) + " of " + split_dir(s) + ": path '" + rel +
                              "' must be relative to the dataset root");
          TensorHeader h;
          try {
            h = read_tensor_header(root / p);
          } catch (const FormatError& e) {
            throw FormatError("sample " + std::to_string(i) + " of " + split_dir(s) + ": " + e.what());
          }
          if (h.shape != shape || h.dtype != dtype)
            throw FormatError("sample " + std::to_string(i) + " of " + split_dir(s) + ": file " + rel +
                              " has shape " + shape_str(h.shape) + ", expected " + shape_str(shape));
        }
      }
    }
    return d;
  }

  const DatasetManifest& manifest() const { return manifest_; }
  const SceneConfig& scene() const { return manifest_.scene; }
  std::size_t size(Split s) const { return slots_[static_cast<std::size_t>(s)].size(); }

  const RenderedImage& image(Split s, std::size_t i) const { return load_image(s, i); }

  /// Ground truth. Reads of the target-train split are counted.
  const LabelMap& label(Split s, std::size_t i) const {
    if (s == Split::kTargetTrain) ++target_train_label_reads_;
    return load_label(s, i);
  }

  std::size_t target_train_label_reads() const { return target_train_label_reads_; }

 private:
  struct Slot {
    std::optional<RenderedImage> image;
    std::optional<LabelMap> label;
  };

  const RenderedImage& load_image(Split s, std::size_t i) const {
    auto& slot = slots_[static_cast<std::size_t>(s)].at(i);
    if (!slot.image) {
      const Shape shape{3, manifest_.scene.height, manifest_.scene.width};
      slot.image = RenderedImage(shape, read_tensor_file<float>(root_ / manifest_.split(s).images[i], shape));
    }
    return *slot.image;
  }

  const LabelMap& load_label(Split s, std::size_t i) const {
    auto& slot = slots_[static_cast<std::size_t>(s)].at(i);
    if (!slot.label) {
      LabelMap m(manifest_.scene.height, manifest_.scene.width);
      m.labels = read_tensor_file<std::uint8_t>(root_ / manifest_.split(s).labels[i], {m.height, m.width});
      slot.label = std::move(m);
    }
    return *slot.label;
  }

  std::filesystem::path root_;
  DatasetManifest manifest_;
  mutable std::array<std::vector<Slot>, 3> slots_;
  mutable std::size_t target_train_label_reads_ = 0;
};

/// The only dataset surface the training loop sees: labelled source, unlabelled target.
class TrainingView {
 public:
  explicit TrainingView(const Dataset& d) : d_(&d) {}

  const SceneConfig& scene() const { return d_->scene(); }
  std::size_t source_size() const { return d_->size(Split::kSourceTrain); }
  std::size_t target_size() const { return d_->size(Split::kTargetTrain); }
  const RenderedImage& source_image(std::size_t i) const { return d_->image(Split::kSourceTrain, i); }
  const LabelMap& source_label(std::size_t i) const { return d_->label(Split::kSourceTrain, i); }
  const RenderedImage& target_image(std::size_t i) const { return d_->image(Split::kTargetTrain, i); }

 private:
  const Dataset* d_;
};

}  // namespace crcda
