#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stainfuse/aggregation.hpp"

namespace stainfuse {

enum class FusionMode { Unweighted, ValidationWeighted, ThresholdDistanceWeighted };

inline constexpr std::array<FusionMode, 3> kAllFusionModes = {
    FusionMode::Unweighted, FusionMode::ValidationWeighted,
    FusionMode::ThresholdDistanceWeighted};

std::string_view to_string(FusionMode mode) noexcept;
FusionMode parse_fusion_mode(std::string_view text);

/// How H&E joins the MelanA magnification models: one flat pool of all
/// models, or H&E fused with the already fused MelanA score.
enum class FusionLayout { Flat, TwoLevel };

std::string_view to_string(FusionLayout layout) noexcept;
FusionLayout parse_fusion_layout(std::string_view text);

inline constexpr double kMinThreshold = 1e-6;
inline constexpr double kMaxThreshold = 1.0 - 1e-6;
/// Raw weights at or below this are treated as zero.
inline constexpr double kWeightEpsilon = 1e-12;

struct ModelCalibration {
  std::string model_id;
  double threshold = 0.5;
  double validation_auroc = 0.5;
};

struct FusionConfig {
  FusionMode mode = FusionMode::ThresholdDistanceWeighted;
  FusionLayout layout = FusionLayout::Flat;
  std::vector<ModelCalibration> models;

  /// Clamps thresholds into [kMinThreshold, kMaxThreshold]; throws on
  /// duplicate ids or validation AUROCs outside [0, 1].
  void normalize();
  const ModelCalibration& find(std::string_view model_id) const;
  bool contains(std::string_view model_id) const noexcept;
};

FusionConfig read_fusion_config(const std::filesystem::path& path);
void write_fusion_config(const std::filesystem::path& path, const FusionConfig& config);
FusionConfig fusion_config_from_json(const std::string& text);
std::string fusion_config_to_json(const FusionConfig& config);

struct FusedPrediction {
  std::string slide_id;
  double score = 0.5;
  std::vector<std::pair<std::string, double>> contributions;  // (model_id, weight)
  FusionMode mode = FusionMode::Unweighted;
  bool fallback = false;  // distance/validation weights all vanished

  bool operator==(const FusedPrediction&) const = default;
};

/// Piecewise-linear map sending [0, t] to [0, 0.5] and [t, 1] to [0.5, 1].
double calibrate_score(double score, double threshold) noexcept;

/// Fuses one prediction per model for a single slide. Scores are calibrated
/// against each model's threshold first, so the fused threshold is 0.5.
FusedPrediction fuse(std::span<const SlidePrediction> predictions, const FusionConfig& config);

/// H&E joined with the MelanA models according to config.layout. Under
/// TwoLevel the MelanA models are fused first and enter the second level with
/// threshold 0.5 and their mean validation AUROC.
FusedPrediction fuse_multimodal(const SlidePrediction& he,
                                std::span<const SlidePrediction> melana,
                                const FusionConfig& config);

/// H&E-first gate. If he_threshold lies outside he.ci (bounds inclusive) the
/// H&E score alone is used (calibrated); otherwise the MelanA models are
/// fused in via fuse_multimodal.
FusedPrediction hierarchical_predict(const SlidePrediction& he, double he_threshold,
                                     std::span<const SlidePrediction> melana,
                                     const FusionConfig& config);

/// `fused:<mode>` unless an explicit id is given.
SlidePrediction to_slide_prediction(const FusedPrediction& fused, Stain stain,
                                    std::string model_id = {});

}  // namespace stainfuse
