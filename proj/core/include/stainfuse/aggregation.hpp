#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stainfuse/scoring.hpp"

namespace stainfuse {

enum class BinaryLabel { Nevus = 0, Melanoma = 1 };

std::string_view to_string(BinaryLabel label) noexcept;
BinaryLabel parse_binary_label(std::string_view text);

struct BootstrapConfig {
  int n_boot = 10000;
  double alpha = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
  int n_boot = 0;
  std::uint64_t seed = 0;

  bool operator==(const ConfidenceInterval&) const = default;
};

struct SlidePrediction {
  std::string slide_id;
  Stain stain = Stain::HE;
  std::string model_id;
  double score = 0.0;
  int n_tiles = 0;
  std::optional<ConfidenceInterval> ci;
  std::optional<BinaryLabel> label;

  bool operator==(const SlidePrediction&) const = default;
};

/// Empirical quantile with linear interpolation between order statistics
/// (h = (n - 1) p). `sorted` must be ascending and non-empty.
double quantile_linear(std::span<const double> sorted, double p);

/// Mean of the tile scores of one slide under one model.
SlidePrediction aggregate_slide(std::span<const TileScore> tiles);

/// Percentile bootstrap CI of the mean tile score. Replicate r draws from
/// its own substream of config.seed, so the result is identical for any
/// worker count.
ConfidenceInterval slide_score_ci(std::span<const double> scores, const BootstrapConfig& config,
                                  unsigned workers = 1);

/// Groups tile scores by (slide_id, model_id) and aggregates each group,
/// attaching a CI when `bootstrap` is given. The per-slide bootstrap seed is
/// derived from bootstrap->seed and the slide and model ids. Output is sorted
/// by (model_id, slide_id).
std::vector<SlidePrediction> aggregate_tile_scores(std::span<const TileScore> scores,
                                                   const std::optional<BootstrapConfig>& bootstrap,
                                                   unsigned workers = 1);

inline constexpr std::string_view kSlidePredictionHeader =
    "slide_id,stain,model_id,score,n_tiles,ci_low,ci_high,label";

void write_slide_predictions(std::ostream& out, std::span<const SlidePrediction> predictions);
void write_slide_predictions(const std::filesystem::path& path,
                             std::span<const SlidePrediction> predictions);
std::vector<SlidePrediction> read_slide_predictions(std::istream& in);
std::vector<SlidePrediction> read_slide_predictions(const std::filesystem::path& path);

}  // namespace stainfuse
