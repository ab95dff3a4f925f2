#pragma once

// Run configuration: one JSON document covering data generation, region labels,
// model widths and training. Unknown keys are rejected at every level.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "crcda/crlabels.hpp"
#include "crcda/dataset.hpp"
#include "crcda/json_util.hpp"
#include "crcda/model.hpp"
#include "crcda/train.hpp"

namespace crcda {

// --- small enums ---------------------------------------------------------------

inline std::string to_string(CrNorm n) { return n == CrNorm::kClasses ? "classes" : "clusters"; }

inline CrNorm parse_cr_norm(const std::string& s) {
  if (s == "classes") return CrNorm::kClasses;
  if (s == "clusters") return CrNorm::kClusters;
  throw ConfigError("unknown cr_norm '" + s + "' (expected classes or clusters)");
}

// --- weights / optimiser ---------------------------------------------------------

inline void to_json(json& j, const LossWeights& w) {
  j = json{{"lambda_cr", w.lambda_cr}, {"lambda_ent", w.lambda_ent}, {"lambda_D", w.lambda_D}};
}

inline void from_json(const json& j, LossWeights& w) {
  const std::string where = "train.weights";
  detail::reject_unknown_keys(j, {"lambda_cr", "lambda_ent", "lambda_D"}, where);
  detail::read_opt(j, "lambda_cr", w.lambda_cr, where);
  detail::read_opt(j, "lambda_ent", w.lambda_ent, where);
  detail::read_opt(j, "lambda_D", w.lambda_D, where);
}

inline void to_json(json& j, const OptimizerConfig& c) {
  j = json{{"lr0", c.lr0}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"power", c.power}};
}

inline void from_json(const json& j, OptimizerConfig& c) {
  const std::string where = "train.optim";
  detail::reject_unknown_keys(j, {"lr0", "momentum", "weight_decay", "power"}, where);
  detail::read_opt(j, "lr0", c.lr0, where);
  detail::read_opt(j, "momentum", c.momentum, where);
  detail::read_opt(j, "weight_decay", c.weight_decay, where);
  detail::read_opt(j, "power", c.power, where);
}

// --- training ----------------------------------------------------------------------

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"mode", to_string(c.mode)},
           {"max_iter", c.max_iter},
           {"batch_source", c.batch_source},
           {"batch_target", c.batch_target},
           {"weights", c.weights},
           {"optim", c.optim},
           {"aemm_power", c.aemm_power},
           {"cr_norm", to_string(c.cr_norm)},
           {"seed", c.seed},
           {"eval_every", c.eval_every},
           {"eval_batch", c.eval_batch}};
}

inline void from_json(const json& j, TrainConfig& c) {
  const std::string where = "train";
  detail::reject_unknown_keys(j,
                              {"mode", "max_iter", "batch_source", "batch_target", "weights", "optim", "aemm_power",
                               "cr_norm", "seed", "eval_every", "eval_batch"},
                              where);
  std::string s;
  if (j.contains("mode")) {
    detail::read_opt(j, "mode", s, where);
    c.mode = parse_mode(s);
  }
  if (j.contains("cr_norm")) {
    detail::read_opt(j, "cr_norm", s, where);
    c.cr_norm = parse_cr_norm(s);
  }
  detail::read_opt(j, "max_iter", c.max_iter, where);
  detail::read_opt(j, "batch_source", c.batch_source, where);
  detail::read_opt(j, "batch_target", c.batch_target, where);
  if (j.contains("weights")) from_json(j.at("weights"), c.weights);
  if (j.contains("optim")) from_json(j.at("optim"), c.optim);
  detail::read_opt(j, "aemm_power", c.aemm_power, where);
  detail::read_opt(j, "seed", c.seed, where);
  detail::read_opt(j, "eval_every", c.eval_every, where);
  detail::read_opt(j, "eval_batch", c.eval_batch, where);
}

// --- model ---------------------------------------------------------------------------

/// Complete model description, as stored in checkpoints.
inline json model_config_to_json(const ModelConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"in_channels", c.in_channels},
              {"feature_channels", c.feature_channels},
              {"stride", c.stride},
              {"num_classes", c.num_classes},
              {"cr_classes", {c.cr_classes[0], c.cr_classes[1]}},
              {"regions", {{c.regions[0].rh, c.regions[0].rw}, {c.regions[1].rh, c.regions[1].rw}}},
              {"domain_channels", c.domain_channels}};
}

inline ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.feature_channels = j.at("feature_channels").get<std::size_t>();
    c.stride = j.at("stride").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    for (std::size_t k = 0; k < 2; ++k) {
      c.cr_classes[k] = j.at("cr_classes").at(k).get<std::size_t>();
      c.regions[k] = {j.at("regions").at(k).at(0).get<std::size_t>(), j.at("regions").at(k).at(1).get<std::size_t>()};
    }
    c.domain_channels = j.at("domain_channels").get<std::size_t>();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

// --- run configuration ---------------------------------------------------------------

struct RunConfig {
  DatasetSpec data;
  CrConfig crlabels;
  ModelConfig model;  // only the channel widths are user-facing; the rest follows the data
  TrainConfig train;
  std::string data_dir;
  std::string out;
};

inline json run_config_to_json(const RunConfig& c) {
  return json{{"data",
               {{"seed", c.data.seed},
                {"num_source", c.data.num_source},
                {"num_target", c.data.num_target},
                {"num_eval", c.data.num_eval},
                {"shift", to_string(c.data.shift)},
                {"scene", c.data.scene}}},
              {"crlabels", c.crlabels},
              {"model", {{"feature_channels", c.model.feature_channels}, {"domain_channels", c.model.domain_channels}}},
              {"train", c.train},
              {"paths", {{"data", c.data_dir}, {"out", c.out}}}};
}

/// Applies the keys present in `j` on top of `c`.
inline void apply_run_config(const json& j, RunConfig& c) {
  detail::reject_unknown_keys(j, {"data", "crlabels", "model", "train", "paths"}, "config");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    const std::string w = "data";
    detail::reject_unknown_keys(d, {"seed", "num_source", "num_target", "num_eval", "shift", "scene"}, w);
    detail::read_opt(d, "seed", c.data.seed, w);
    detail::read_opt(d, "num_source", c.data.num_source, w);
    detail::read_opt(d, "num_target", c.data.num_target, w);
    detail::read_opt(d, "num_eval", c.data.num_eval, w);
    if (d.contains("shift")) {
      std::string s;
      detail::read_opt(d, "shift", s, w);
      c.data.shift = parse_shift(s);
    }
    if (d.contains("scene")) from_json(d.at("scene"), c.data.scene);
  }
  if (j.contains("crlabels")) from_json(j.at("crlabels"), c.crlabels);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(m, {"feature_channels", "domain_channels"}, "model");
    detail::read_opt(m, "feature_channels", c.model.feature_channels, "model");
    detail::read_opt(m, "domain_channels", c.model.domain_channels, "model");
  }
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown_keys(p, {"data", "out"}, "paths");
    detail::read_opt(p, "data", c.data_dir, "paths");
    detail::read_opt(p, "out", c.out, "paths");
  }
}

inline void load_run_config(const std::filesystem::path& file, RunConfig& c) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + file.string() + " is not valid JSON: " + e.what());
  }
  apply_run_config(j, c);
}

}  // namespace crcda
