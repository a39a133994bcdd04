#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stainfuse/aggregation.hpp"
#include "stainfuse/evaluation.hpp"
#include "stainfuse/features.hpp"
#include "stainfuse/fusion.hpp"
#include "stainfuse/scoring.hpp"
#include "stainfuse/synth.hpp"
#include "stainfuse/tessellation.hpp"

namespace stainfuse {

/// One tile scorer: which stain and magnification it reads and how it is
/// trained. The reference_* fields document the network the scorer stands in
/// for and are carried into the model file unchanged.
struct ScorerSpec {
  std::string model_id;
  Stain stain = Stain::HE;
  MagLevel magnification = MagLevel::X40;
  int epochs = 20;
  double learning_rate = 2.5e-4;
  int sampling_number = 598;
  std::string reference_architecture;
  std::string reference_pooling;
};

struct TrainingOptions {
  int batch_size = 32;
  JitterParams jitter;
  /// Jittered copies per training tile in addition to the original.
  int jitter_variants = 1;
  int cv_folds = 5;
};

struct PipelineConfig {
  std::uint64_t seed = 20240101;
  unsigned workers = 1;
  std::filesystem::path output_root = "stainfuse_out";
  /// Defaults to <output_root>/data when empty.
  std::filesystem::path data_root;

  SynthConfig synth;
  TessellationOptions tessellation;
  bool write_tiles = false;
  TrainingOptions training;
  std::vector<ScorerSpec> scorers;

  FusionMode fusion_mode = FusionMode::ThresholdDistanceWeighted;
  FusionLayout fusion_layout = FusionLayout::Flat;
  BootstrapConfig bootstrap;        // cohort AUROC CIs
  BootstrapConfig slide_bootstrap;  // per-slide score CIs (hierarchical gate)

  std::string train_cohort = "siteA";
  bool in_situ_as_melanoma = true;
  /// Tile-score CSV replacing tessellation, training and scoring.
  std::optional<std::filesystem::path> external_scores;

  std::filesystem::path resolved_data_root() const {
    return data_root.empty() ? output_root / "data" : data_root;
  }
  const ScorerSpec& he_scorer() const;
  std::vector<const ScorerSpec*> melana_scorers() const;
  void validate() const;
};

PipelineConfig default_pipeline_config();
PipelineConfig pipeline_config_from_json(const std::string& text);
std::string pipeline_config_to_json(const PipelineConfig& config);
/// Throws ConfigError naming the path when the file is missing or invalid.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Hex FNV-1a of the canonical JSON form; recorded in run manifests.
std::string config_hash(const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Stages

std::vector<CohortManifest> run_synth(const PipelineConfig& config);

/// Every manifest_*.json under the data root, ordered by cohort id.
std::vector<CohortManifest> load_manifests(const PipelineConfig& config);

/// Binary label used for evaluation; nullopt drops the slide.
std::optional<BinaryLabel> binary_label(SlideLabel label, bool in_situ_as_melanoma) noexcept;

/// Tiles and features of one slide under one scorer.
struct SlideFeatures {
  std::string slide_id;
  std::vector<TileRef> tiles;
  /// variants[i][0] is tile i unaugmented; further entries are jittered.
  std::vector<std::vector<FeatureVector>> variants;
};

/// Features per scorer model_id, then per slide (in manifest order).
using FeatureTable = std::map<std::string, std::vector<SlideFeatures>>;

/// Tessellates and extracts features for the given manifest entries.
/// `augment` entries get config.training.jitter_variants extra copies.
FeatureTable extract_cohort_features(const PipelineConfig& config, const CohortManifest& manifest,
                                     const std::vector<ManifestEntry>& entries, bool augment);

/// Tile manifests (and optionally PNG tiles) for every slide of every manifest.
void run_tessellate(const PipelineConfig& config);

struct TrainingResult {
  std::vector<ScorerModel> models;
  /// Out-of-fold slide predictions on the training split, all scorers.
  std::vector<SlidePrediction> validation_predictions;
  std::map<std::string, DecisionThreshold> thresholds;
  FusionConfig fusion;
  /// slide_id -> fold index
  std::map<std::string, int> folds;
};

TrainingResult run_train(const PipelineConfig& config);

/// Scores every slide of every evaluation cohort with saved models. Writes
/// <output_root>/tile_scores/<cohort>.csv and returns the scores per cohort.
std::map<std::string, std::vector<TileScore>> run_score(const PipelineConfig& config);

struct RunSummary {
  std::vector<RocResult> results;
  std::vector<ReportRowSpec> rows;
  std::vector<std::string> cohorts;
  std::string table;
  /// Slide predictions (base models, fused products) per evaluation cohort.
  std::map<std::string, std::vector<SlidePrediction>> predictions;
  FusionConfig fusion;
  /// Slides whose H&E CI contained the threshold, per cohort.
  std::map<std::string, std::vector<std::string>> uncertain_slides;
};

/// Full experiment: tessellate, train, score, aggregate, select thresholds,
/// fuse, gate and evaluate. Writes all artifacts under output_root.
RunSummary run_pipeline(const PipelineConfig& config);

/// Report id of a fused product under a given mode.
std::string fused_model_id(FusionMode mode, std::string_view product);

inline constexpr std::string_view kProductMelanA = "MelanA_all";
inline constexpr std::string_view kProductMultimodal = "MelanA_HE";
inline constexpr std::string_view kProductHierarchical = "hierarchical";

/// Builds evaluation rows (8 rows: H&E, four MelanA, MelanA combined,
/// MelanA + H&E, hierarchical) for the configured fusion mode.
std::vector<ReportRowSpec> report_rows(const PipelineConfig& config);

/// Per-slide fusion of base-model predictions for one cohort: every mode for
/// the MelanA and multimodal products, plus the hierarchical gate. Appends
/// fused rows to `predictions`, returns ids of gate-uncertain slides.
std::vector<std::string> fuse_cohort(const PipelineConfig& config, const FusionConfig& fusion,
                                     double he_threshold,
                                     std::vector<SlidePrediction>& predictions);

/// Evaluates every model present in `predictions` on one cohort.
std::vector<RocResult> evaluate_predictions(const PipelineConfig& config,
                                            const std::string& cohort_id,
                                            const std::vector<SlidePrediction>& predictions);

}  // namespace stainfuse
