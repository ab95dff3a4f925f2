// crcda: data generation, region labels, training, evaluation and reporting.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crcda/checkpoint.hpp"
#include "crcda/config.hpp"
#include "crcda/crlabels.hpp"
#include "crcda/dataset.hpp"
#include "crcda/metrics.hpp"
#include "crcda/train.hpp"

namespace fs = std::filesystem;
using namespace crcda;

namespace {

// Flags layered over defaults and an optional config file: a flag only takes
// effect when given on the command line.
struct Layered {
  std::vector<std::function<void(RunConfig&)>> apply;

  template <class V, class Set>
  CLI::Option* add(CLI::App* app, const std::string& name, V def, Set set, const std::string& desc) {
    auto v = std::make_shared<V>(def);
    auto* opt = app->add_option(name, *v, desc)->capture_default_str();
    apply.push_back([v, opt, set](RunConfig& c) {
      if (opt->count() > 0) set(c, *v);
    });
    return opt;
  }

  void resolve(const std::string& config_file, RunConfig& c) const {
    if (!config_file.empty()) load_run_config(config_file, c);
    for (const auto& f : apply) f(c);
  }
};

std::string mode_list() {
  std::string s;
  for (Mode m : kAllModes) s += (s.empty() ? "" : ", ") + to_string(m);
  return s;
}

std::vector<std::string> mode_names() {
  std::vector<std::string> v;
  for (Mode m : kAllModes) v.push_back(to_string(m));
  return v;
}

// A wrong --data path is a usage mistake; a present but broken tree stays a format error.
Dataset open_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory " + dir.string() + " does not exist; run gen-data first");
  return Dataset::open(dir);
}

std::optional<CrLabelSet> load_cr_if_present(const fs::path& data) {
  const auto p = data / "crlabels.json";
  if (!fs::exists(p)) return std::nullopt;
  return load_cr_labels(p);
}

// --- gen-data -----------------------------------------------------------------

void gen_data(const RunConfig& c) {
  if (c.out.empty()) throw ConfigError("gen-data: --out is required");
  const auto& s = c.data.scene;
  // Region labels are cut from these images later, so the frame must tile into both region sizes.
  validate(c.crlabels, s.height, s.width);
  validate(s);
  const auto d = Dataset::generate(c.data);
  d.write(c.out);
  std::cout << "wrote " << c.out << ": " << d.size(Split::kSourceTrain) << " source-train, "
            << d.size(Split::kTargetTrain) << " target-train, " << d.size(Split::kTargetEval) << " target-eval ("
            << s.height << "x" << s.width << ", shift " << to_string(c.data.shift) << ", seed " << c.data.seed << ")\n";
}

// --- make-crlabels ----------------------------------------------------------------

void print_histogram(const CrHead& h) {
  // Cluster sizes bucketed by powers of two.
  std::map<std::size_t, std::size_t> buckets;
  for (auto n : h.cluster_sizes) {
    std::size_t b = 1;
    while (b * 2 <= n) b *= 2;
    ++buckets[b];
  }
  for (const auto& [lo, count] : buckets)
    std::cout << "    size " << std::setw(6) << lo << "-" << std::left << std::setw(6) << (2 * lo - 1) << std::right
              << " : " << std::string(std::min<std::size_t>(count, 60), '#') << " " << count << "\n";
}

void make_crlabels(const RunConfig& c) {
  if (c.data_dir.empty()) throw ConfigError("make-crlabels: --data is required");
  const auto d = open_data(c.data_dir);
  CrLabelSet set;
  try {
    set = build_source_cr_labels(d, c.crlabels);
  } catch (const PipelineError& e) {
    throw PipelineError(std::string(e.what()) +
                        " (try a larger --eps, a smaller --min-pts, or leave --eps at 0 for the automatic estimate)");
  }
  const auto out = fs::path(c.data_dir) / "crlabels.json";
  save_cr_labels(out, set);
  std::cout << "wrote " << out.string() << " for " << set.num_images() << " source images\n";
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& h = set.heads[k];
    std::cout << "  head " << (k + 1) << " (" << h.size.rh << "x" << h.size.rw << " regions): N_" << (k + 1) << " = "
              << h.num_clusters << " (eps " << h.eps << ", " << h.raw_clusters << " raw clusters, " << h.noise_points
              << " noise descriptors)\n";
    print_histogram(h);
  }
}

// --- train ----------------------------------------------------------------------------

struct TrainPaths {
  std::string resume;
  std::string metrics;
  std::size_t stop_after = 0;
};

void train(const RunConfig& c, const TrainPaths& paths) {
  if (c.data_dir.empty()) throw ConfigError("train: --data is required");
  const fs::path ckpt = c.out.empty() ? fs::path("checkpoint.bin") : fs::path(c.out);
  const fs::path metrics = paths.metrics.empty() ? ckpt.parent_path() / "metrics.csv" : fs::path(paths.metrics);
  const auto d = open_data(c.data_dir);
  std::optional<CrLabelSet> cr;
  if (terms_of(c.train.mode).cr) {
    cr = load_cr_if_present(c.data_dir);
    if (!cr)
      throw ConfigError("mode " + to_string(c.train.mode) + " needs " + (fs::path(c.data_dir) / "crlabels.json").string() +
                        "; run make-crlabels first");
  }
  const json echo = run_config_to_json(c);
  Trainer t(c.train, c.model, d, cr ? &*cr : nullptr);

  std::vector<std::string> kept;
  if (!paths.resume.empty()) {
    auto ck = load_checkpoint(paths.resume);
    if (!ck.config.contains("train") || ck.config.at("train") != echo.at("train"))
      throw ConfigError("--resume: checkpoint was written with a different training configuration");
    if (ck.model_config != t.model_config()) throw ConfigError("--resume: checkpoint model does not match the dataset");
    const auto iter = ck.iter;
    t.restore(iter, std::move(ck.model), std::move(ck.optim), ck.rng());
    // Keep the log rows that precede the checkpoint.
    std::ifstream in(metrics);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= iter) kept.push_back(line);
  }
  if (metrics.has_parent_path()) fs::create_directories(metrics.parent_path());
  std::ofstream log(metrics, std::ios::trunc);
  if (!log) throw PipelineError("cannot write " + metrics.string());
  log << kMetricsHeader << '\n';
  for (const auto& l : kept) log << l << '\n';
  log.flush();

  auto save = [&] { save_checkpoint(ckpt, make_checkpoint(t, echo)); };
  if (t.iter() == 0) save();
  std::optional<double> last_miou;
  const std::size_t until = paths.stop_after ? std::min(paths.stop_after, c.train.max_iter) : c.train.max_iter;
  t.run(until, [&](const LossReport& r) {
    log << to_csv_row(r) << '\n';
    log.flush();
    if (r.target_miou) {
      last_miou = r.target_miou;
      save();
      std::cerr << "[" << to_string(c.train.mode) << "] iter " << r.iter << "/" << c.train.max_iter
                << "  loss_seg " << std::fixed << std::setprecision(4) << r.loss_seg.value_or(0.0) << "  target mIoU "
                << std::setprecision(2) << 100.0 * *r.target_miou << std::defaultfloat << "\n";
    }
  });
  save();
  if (t.iter() < c.train.max_iter) {
    std::cout << "stopped at iteration " << t.iter() << " of " << c.train.max_iter << "; resume with --resume "
              << ckpt.string() << "\n";
    return;
  }
  if (!last_miou) last_miou = t.evaluate_target().miou;
  std::cout << "final target mIoU: " << std::fixed << std::setprecision(6) << *last_miou << " (" << std::setprecision(2)
            << 100.0 * *last_miou << " points)\n"
            << "checkpoint: " << ckpt.string() << "\nmetrics: " << metrics.string() << "\n";
}

// --- eval / report --------------------------------------------------------------------

void eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split, const std::string& out) {
  auto ck = load_checkpoint(ckpt_path);
  const auto d = open_data(data_dir);
  if (d.scene().height != ck.model_config.height || d.scene().width != ck.model_config.width)
    throw ConfigError("eval: dataset image size does not match the checkpoint");
  auto rep = evaluate(ck.model, d, parse_split(split));
  rep.checkpoint = ckpt_path;
  rep.mode = ck.config.contains("train") ? ck.config["train"].value("mode", "") : "";
  const auto j = report_to_json(rep).dump(2);
  if (out.empty()) {
    std::cout << j << '\n';
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream(out) << j << '\n';
    std::cout << rep.mode << " on " << rep.split << ": mIoU " << std::fixed << std::setprecision(6) << rep.miou
              << ", pixel accuracy " << rep.pixel_accuracy << ", mean entropy " << rep.mean_entropy << "\n";
  }
}

void report(const std::vector<std::string>& inputs, const std::string& out_csv, const std::string& out_json) {
  std::vector<MetricsReport> reports;
  for (const auto& p : inputs) {
    std::ifstream in(p);
    if (!in) throw ConfigError("report: cannot open " + p);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw FormatError("report: " + p + " is not valid JSON: " + e.what());
    }
    if (j.is_array())
      for (const auto& r : j) reports.push_back(report_from_json(r));
    else
      reports.push_back(report_from_json(j));
  }
  const auto cmp = compare_modes(reports);
  std::cout << cmp.text();
  if (!out_csv.empty()) std::ofstream(out_csv) << cmp.csv();
  if (!out_json.empty()) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    std::ofstream(out_json) << arr.dump(2) << '\n';
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Adapt a street-scene segmenter from labelled synthetic scenes to an unlabelled rendering."};
  app.require_subcommand(1);
  app.get_formatter()->column_width(44);
  const RunConfig D;

  // gen-data
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic source/target dataset.");
  Layered gl;
  std::string g_config;
  g->add_option("--config", g_config, "JSON run configuration, flags override it (default: none)");
  gl.add(g, "--out", std::string("data"), [](RunConfig& c, const std::string& v) { c.out = v; }, "Output directory");
  gl.add(g, "--seed", D.data.seed, [](RunConfig& c, std::uint64_t v) { c.data.seed = v; }, "Dataset seed");
  gl.add(g, "--num-source", D.data.num_source, [](RunConfig& c, std::size_t v) { c.data.num_source = v; },
         "Source-train samples");
  gl.add(g, "--num-target", D.data.num_target, [](RunConfig& c, std::size_t v) { c.data.num_target = v; },
         "Target-train samples");
  gl.add(g, "--num-eval", D.data.num_eval, [](RunConfig& c, std::size_t v) { c.data.num_eval = v; },
         "Target-eval samples");
  auto g_h = std::make_shared<std::size_t>(D.data.scene.height);
  auto g_w = std::make_shared<std::size_t>(D.data.scene.width);
  auto* oh = g->add_option("--height", *g_h, "Image height; band geometry is rescaled to it")->capture_default_str();
  auto* ow = g->add_option("--width", *g_w, "Image width; segment widths are rescaled to it")->capture_default_str();
  gl.add(g, "--shift", to_string(D.data.shift), [](RunConfig& c, const std::string& v) { c.data.shift = parse_shift(v); },
         "Target appearance shift")
      ->check(CLI::IsMember({"palette", "gamma", "noise", "all"}));
  g->callback([&] {
    RunConfig c;
    c.out = "data";
    gl.resolve(g_config, c);
    if (oh->count() || ow->count())
      c.data.scene = scaled_scene(oh->count() ? *g_h : c.data.scene.height, ow->count() ? *g_w : c.data.scene.width);
    gen_data(c);
  });

  // make-crlabels
  auto* m = app.add_subcommand("make-crlabels", "Cluster source regions into contextual-relation labels.");
  Layered ml;
  std::string m_config;
  m->add_option("--config", m_config, "JSON run configuration, flags override it (default: none)");
  ml.add(m, "--data", std::string("data"), [](RunConfig& c, const std::string& v) { c.data_dir = v; }, "Dataset directory");
  ml.add(m, "--eps", D.crlabels.eps, [](RunConfig& c, double v) { c.crlabels.eps = v; },
         "DBSCAN radius; 0 estimates it from the data");
  ml.add(m, "--min-pts", D.crlabels.min_pts, [](RunConfig& c, std::size_t v) { c.crlabels.min_pts = v; },
         "DBSCAN core-point threshold (neighbours incl. self)");
  ml.add(m, "--max-clusters", D.crlabels.max_clusters, [](RunConfig& c, std::size_t v) { c.crlabels.max_clusters = v; },
         "Cap on clusters per head");
  ml.add(m, "--bins", D.crlabels.bins, [](RunConfig& c, std::size_t v) { c.crlabels.bins = v; },
         "Orientation histogram bins");
  m->callback([&] {
    RunConfig c;
    c.data_dir = "data";
    ml.resolve(m_config, c);
    make_crlabels(c);
  });

  // train
  auto* t = app.add_subcommand("train", "Train one ablation mode.");
  Layered tl;
  std::string t_config;
  TrainPaths tp;
  t->add_option("--config", t_config, "JSON run configuration, flags override it (default: none)");
  tl.add(t, "--data", std::string("data"), [](RunConfig& c, const std::string& v) { c.data_dir = v; }, "Dataset directory");
  tl.add(t, "--mode", to_string(D.train.mode), [](RunConfig& c, const std::string& v) { c.train.mode = parse_mode(v); },
         "Ablation mode: " + mode_list())
      ->check(CLI::IsMember(mode_names()));
  tl.add(t, "--iters", D.train.max_iter, [](RunConfig& c, std::size_t v) { c.train.max_iter = v; }, "Training iterations");
  tl.add(t, "--out", std::string("checkpoint.bin"), [](RunConfig& c, const std::string& v) { c.out = v; },
         "Checkpoint path; metrics.csv goes next to it");
  tl.add(t, "--seed", D.train.seed, [](RunConfig& c, std::uint64_t v) { c.train.seed = v; },
         "Initialisation and sampling seed");
  tl.add(t, "--batch-source", D.train.batch_source, [](RunConfig& c, std::size_t v) { c.train.batch_source = v; },
         "Source images per step");
  tl.add(t, "--batch-target", D.train.batch_target, [](RunConfig& c, std::size_t v) { c.train.batch_target = v; },
         "Target images per step");
  tl.add(t, "--lr", D.train.optim.lr0, [](RunConfig& c, double v) { c.train.optim.lr0 = v; }, "Initial learning rate");
  tl.add(t, "--momentum", D.train.optim.momentum, [](RunConfig& c, double v) { c.train.optim.momentum = v; }, "SGD momentum");
  tl.add(t, "--weight-decay", D.train.optim.weight_decay, [](RunConfig& c, double v) { c.train.optim.weight_decay = v; },
         "SGD weight decay");
  tl.add(t, "--power", D.train.optim.power, [](RunConfig& c, double v) { c.train.optim.power = v; },
         "Polynomial learning-rate decay power");
  tl.add(t, "--lambda-cr", D.train.weights.lambda_cr, [](RunConfig& c, double v) { c.train.weights.lambda_cr = v; },
         "Weight of the supervised region loss");
  tl.add(t, "--lambda-ent", D.train.weights.lambda_ent, [](RunConfig& c, double v) { c.train.weights.lambda_ent = v; },
         "Weight of the entropy max-min terms");
  tl.add(t, "--lambda-d", D.train.weights.lambda_D, [](RunConfig& c, double v) { c.train.weights.lambda_D = v; },
         "Weight of the domain-classifier term");
  tl.add(t, "--aemm-power", D.train.aemm_power, [](RunConfig& c, double v) { c.train.aemm_power = v; },
         "Decay power of the regulariser weight lambda_R");
  tl.add(t, "--cr-norm", to_string(D.train.cr_norm), [](RunConfig& c, const std::string& v) { c.train.cr_norm = parse_cr_norm(v); },
         "Region entropy normaliser: classes (C) or clusters (N_k)")
      ->check(CLI::IsMember({"classes", "clusters"}));
  tl.add(t, "--eval-every", D.train.eval_every, [](RunConfig& c, std::size_t v) { c.train.eval_every = v; },
         "Evaluate and checkpoint every N iterations (0: only at the end)");
  tl.add(t, "--feature-channels", D.model.feature_channels, [](RunConfig& c, std::size_t v) { c.model.feature_channels = v; },
         "Feature extractor width");
  tl.add(t, "--domain-channels", D.model.domain_channels, [](RunConfig& c, std::size_t v) { c.model.domain_channels = v; },
         "Domain classifier width");
  t->add_option("--resume", tp.resume, "Continue from this checkpoint, same configuration required (default: none)");
  t->add_option("--metrics", tp.metrics, "Metrics CSV path (default: metrics.csv next to --out)");
  t->add_option("--stop-after", tp.stop_after, "Stop after this many iterations, leaving a resumable checkpoint (0: run to the end)")
      ->capture_default_str();
  t->callback([&] {
    RunConfig c;
    c.data_dir = "data";
    c.out = "checkpoint.bin";
    tl.resolve(t_config, c);
    train(c, tp);
  });

  // eval
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one split.");
  std::string e_ckpt, e_data = "data", e_split = "target-eval", e_out;
  e->add_option("--ckpt", e_ckpt, "Checkpoint file (required)")->required();
  e->add_option("--data", e_data, "Dataset directory")->capture_default_str();
  e->add_option("--split", e_split, "Split to score")
      ->capture_default_str()
      ->check(CLI::IsMember({"source-train", "target-train", "target-eval"}));
  e->add_option("--out", e_out, "Write the report JSON here (default: none, print to stdout)");
  e->callback([&] { eval(e_ckpt, e_data, e_split, e_out); });

  // report
  auto* r = app.add_subcommand("report", "Compare evaluation reports across modes.");
  std::vector<std::string> r_in;
  std::string r_out, r_json;
  r->add_option("--inputs", r_in, "Report JSON files, objects or arrays (required)")->required()->expected(1, -1);
  r->add_option("--out", r_out, "Write the comparison CSV here (default: none)");
  r->add_option("--json", r_json, "Write all merged reports as a JSON array here (default: none)");
  r->callback([&] { report(r_in, r_out, r_json); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
