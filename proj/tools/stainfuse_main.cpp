// stainfuse: command-line driver for the multi-stain slide classification
// pipeline. Exit codes: 0 ok, 1 pipeline error, 2 usage or config error.

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "stainfuse/aggregation.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/evaluation.hpp"
#include "stainfuse/fusion.hpp"
#include "stainfuse/image.hpp"
#include "stainfuse/parallel.hpp"
#include "stainfuse/pipeline.hpp"
#include "stainfuse/random.hpp"
#include "stainfuse/scoring.hpp"
#include "stainfuse/tessellation.hpp"

namespace fs = std::filesystem;
using namespace stainfuse;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::string out;
  bool quiet = false;
};

PipelineConfig resolve_config(const GlobalOptions& g) {
  PipelineConfig cfg = g.config_path.empty() ? default_pipeline_config()
                                             : load_pipeline_config(g.config_path);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.synth.seed = *g.seed;
  }
  if (g.workers) cfg.workers = *g.workers;
  if (!g.out.empty()) {
    if (cfg.data_root.empty()) cfg.data_root = fs::path(g.out) / "data";
    cfg.output_root = g.out;
  }
  cfg.validate();
  return cfg;
}

bool has_manifests(const PipelineConfig& cfg) {
  const fs::path root = cfg.resolved_data_root();
  if (!fs::is_directory(root)) return false;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.path().filename().string().rfind("manifest_", 0) == 0) return true;
  }
  return false;
}

int cmd_synth(const GlobalOptions& g) {
  const PipelineConfig cfg = resolve_config(g);
  for (const CohortManifest& m : run_synth(cfg)) {
    std::cout << fmt::format("{}: {} slides\n", m.cohort_id, m.entries.size());
  }
  return 0;
}

struct TessellateOptions {
  std::string image;
  std::string annotation;
  std::string mag = "X40";
  std::string stain = "HE";
  double um_per_px = kBaseUmPerPx;
  std::string output;
};

int cmd_tessellate(const GlobalOptions& g, const TessellateOptions& o) {
  if (o.image.empty()) {
    run_tessellate(resolve_config(g));
    return 0;
  }
  if (o.annotation.empty()) throw ConfigError("--annotation is required with --image");
  const MagLevel level = parse_mag_level(o.mag);
  SlideImage base{fs::path(o.image).stem().string(), parse_stain(o.stain), o.um_per_px,
                  read_png(o.image)};
  const AnnotationMask mask = read_annotation(o.annotation);
  const SlideImage image =
      base.um_per_px == mag_resolution(level) ? std::move(base) : downscale(base, level);
  const auto tiles = tessellate(image, mask, level);
  if (o.output.empty()) {
    write_tile_manifest(std::cout, tiles);
  } else {
    std::ofstream out(o.output, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + o.output + "'");
    write_tile_manifest(out, tiles);
  }
  spdlog::info("{} tiles", tiles.size());
  return 0;
}

int cmd_train(const GlobalOptions& g) {
  const TrainingResult r = run_train(resolve_config(g));
  for (const ModelCalibration& m : r.fusion.models) {
    std::cout << fmt::format("{}: threshold {:.4f}, validation AUROC {:.3f}\n", m.model_id,
                             m.threshold, m.validation_auroc);
  }
  return 0;
}

int cmd_score(const GlobalOptions& g) {
  for (const auto& [cohort, scores] : run_score(resolve_config(g))) {
    std::cout << fmt::format("{}: {} tile scores\n", cohort, scores.size());
  }
  return 0;
}

struct AggregateOptions {
  std::string input;
  std::string output;
  int n_boot = 10000;
  double alpha = 0.05;
  bool no_ci = false;
};

int cmd_aggregate(const GlobalOptions& g, const AggregateOptions& o) {
  const PipelineConfig cfg = resolve_config(g);
  const auto scores = import_external_scores(o.input);
  std::optional<BootstrapConfig> boot;
  if (!o.no_ci) {
    boot = BootstrapConfig{o.n_boot, o.alpha, derive_seed(cfg.seed, "slide_bootstrap")};
    boot->validate();
  }
  const auto preds = aggregate_tile_scores(scores, boot, cfg.workers);
  if (o.output.empty()) {
    write_slide_predictions(std::cout, preds);
  } else {
    write_slide_predictions(o.output, preds);
  }
  return 0;
}

struct FuseOptions {
  std::string input;
  std::string fusion_config;
  std::string output;
  std::string mode;
  std::string he_model;
};

int cmd_fuse(const GlobalOptions&, const FuseOptions& o) {
  FusionConfig fusion = read_fusion_config(o.fusion_config);
  if (!o.mode.empty()) fusion.mode = parse_fusion_mode(o.mode);
  const auto preds = read_slide_predictions(o.input);

  std::map<std::string, std::vector<SlidePrediction>> by_slide;
  for (const SlidePrediction& p : preds) by_slide[p.slide_id].push_back(p);

  std::vector<SlidePrediction> out;
  for (auto& [slide, rows] : by_slide) {
    try {
      if (o.he_model.empty()) {
        std::vector<SlidePrediction> members;
        for (const SlidePrediction& p : rows) {
          if (fusion.contains(p.model_id)) members.push_back(p);
        }
        SlidePrediction f = to_slide_prediction(fuse(members, fusion), members.front().stain);
        f.label = members.front().label;
        out.push_back(std::move(f));
        continue;
      }
      const auto he = std::find_if(rows.begin(), rows.end(),
                                   [&](const SlidePrediction& p) { return p.model_id == o.he_model; });
      if (he == rows.end()) throw Error("no prediction for H&E model " + o.he_model);
      std::vector<SlidePrediction> melana;
      for (const SlidePrediction& p : rows) {
        if (p.model_id != o.he_model && fusion.contains(p.model_id)) melana.push_back(p);
      }
      const double t = fusion.find(o.he_model).threshold;
      SlidePrediction f = to_slide_prediction(hierarchical_predict(*he, t, melana, fusion),
                                              Stain::HE, fused_model_id(fusion.mode, kProductHierarchical));
      f.label = he->label;
      out.push_back(std::move(f));
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError("fuse", slide, e.what());
    }
  }
  if (o.output.empty()) {
    write_slide_predictions(std::cout, out);
  } else {
    write_slide_predictions(o.output, out);
  }
  return 0;
}

struct EvaluateOptions {
  std::string input;
  std::string output;
  std::string model_id = "model";
  int n_boot = 10000;
  double alpha = 0.05;
};

int cmd_evaluate(const GlobalOptions& g, const EvaluateOptions& o) {
  const PipelineConfig cfg = resolve_config(g);
  const CohortPredictions cohort = read_cohort_csv(o.input);
  const BootstrapConfig boot{o.n_boot, o.alpha,
                             mix_seed(derive_seed(cfg.seed, "bootstrap"), stream_id(cohort.cohort_id))};
  boot.validate();
  RocResult r;
  try {
    r = evaluate_cohort(cohort, boot, o.model_id, cfg.workers);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("evaluate", "", e.what());
  }
  const std::vector<RocResult> results{r};
  const std::vector<ReportRowSpec> rows{{o.model_id, o.model_id}};
  const std::vector<std::string> cohorts{cohort.cohort_id};
  std::cout << render_report_table(results, rows, cohorts);
  if (!o.output.empty()) {
    std::ofstream out(o.output, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + o.output + "'");
    write_report_csv(out, results);
  }
  return 0;
}

int cmd_run(const GlobalOptions& g) {
  const PipelineConfig cfg = resolve_config(g);
  if (!cfg.external_scores && !has_manifests(cfg)) {
    spdlog::info("run: no manifests under {}; generating synthetic cohorts",
                 cfg.resolved_data_root().string());
    run_synth(cfg);
  }
  const RunSummary summary = run_pipeline(cfg);
  std::cout << summary.table;
  return 0;
}

int cmd_config(const GlobalOptions& g) {
  std::cout << pipeline_config_to_json(resolve_config(g)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stain melanoma/nevus slide classification pipeline"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("-c,--config", g.config_path, "Pipeline config (JSON)");
  app.add_option("--seed", g.seed, "Override the root seed");
  app.add_option("--workers", g.workers, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Override the output root");
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");

  auto* synth = app.add_subcommand("synth", "Generate the synthetic multi-site cohorts");

  TessellateOptions tess;
  auto* tessellate = app.add_subcommand("tessellate", "Tile slides inside their annotations");
  tessellate->add_option("--image", tess.image, "Single slide PNG instead of the manifests");
  tessellate->add_option("--annotation", tess.annotation, "Annotation JSON for --image");
  tessellate->add_option("--mag", tess.mag, "Magnification level (X40, X20, X10, X5)");
  tessellate->add_option("--stain", tess.stain, "Stain of --image (HE, MelanA)");
  tessellate->add_option("--um-per-px", tess.um_per_px, "Resolution of --image");
  tessellate->add_option("-o,--output", tess.output, "Tile manifest CSV (default stdout)");

  auto* train = app.add_subcommand("train", "Train scorers, select thresholds, write fusion config");
  auto* score = app.add_subcommand("score", "Score evaluation cohorts with trained models");

  AggregateOptions agg;
  auto* aggregate = app.add_subcommand("aggregate", "Tile scores to slide scores with bootstrap CIs");
  aggregate->add_option("-i,--input", agg.input, "Tile score CSV")->required();
  aggregate->add_option("-o,--output", agg.output, "Slide prediction CSV (default stdout)");
  aggregate->add_option("--n-boot", agg.n_boot, "Bootstrap replicates");
  aggregate->add_option("--alpha", agg.alpha, "CI level is 1 - alpha");
  aggregate->add_flag("--no-ci", agg.no_ci, "Skip the bootstrap");

  FuseOptions fuse_opts;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse slide predictions of several models");
  fuse_cmd->add_option("-i,--input", fuse_opts.input, "Slide prediction CSV")->required();
  fuse_cmd->add_option("--fusion-config", fuse_opts.fusion_config, "Fusion config JSON")->required();
  fuse_cmd->add_option("-o,--output", fuse_opts.output, "Fused prediction CSV (default stdout)");
  fuse_cmd->add_option("--mode", fuse_opts.mode, "Override the fusion mode");
  fuse_cmd->add_option("--hierarchical", fuse_opts.he_model,
                       "H&E model id; gate the fusion on its slide-score CI");

  EvaluateOptions ev;
  auto* evaluate = app.add_subcommand("evaluate", "AUROC with bootstrap CI for a scored cohort");
  evaluate->add_option("-i,--input,input", ev.input, "CSV with slide_id,score,label")->required();
  evaluate->add_option("-o,--output", ev.output, "Report CSV");
  evaluate->add_option("--model-id", ev.model_id, "Row label in the report");
  evaluate->add_option("--n-boot", ev.n_boot, "Bootstrap replicates");
  evaluate->add_option("--alpha", ev.alpha, "CI level is 1 - alpha");

  auto* run = app.add_subcommand("run", "Full experiment from one config");
  auto* config = app.add_subcommand("config", "Print the effective config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  spdlog::set_level(g.quiet ? spdlog::level::warn : spdlog::level::info);
  spdlog::set_pattern("[%l] %v");
  try {
    if (synth->parsed()) return cmd_synth(g);
    if (tessellate->parsed()) return cmd_tessellate(g, tess);
    if (train->parsed()) return cmd_train(g);
    if (score->parsed()) return cmd_score(g);
    if (aggregate->parsed()) return cmd_aggregate(g, agg);
    if (fuse_cmd->parsed()) return cmd_fuse(g, fuse_opts);
    if (evaluate->parsed()) return cmd_evaluate(g, ev);
    if (run->parsed()) return cmd_run(g);
    if (config->parsed()) return cmd_config(g);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 2;
}
