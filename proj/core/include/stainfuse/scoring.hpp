#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stainfuse/features.hpp"
#include "stainfuse/random.hpp"
#include "stainfuse/tessellation.hpp"

namespace stainfuse {

// ---------------------------------------------------------------------------
// Per-slide tile sampling

/// Draws exactly `quota` indices from [0, n): without replacement when
/// n >= quota, with replacement otherwise. n must be > 0.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t quota, Engine& engine);

struct SlideTiles {
  std::string slide_id;
  std::vector<TileRef> tiles;
};

struct SamplingWarning {
  std::string slide_id;
  std::string message;
};

struct TileSample {
  std::vector<TileRef> tiles;
  std::vector<SamplingWarning> warnings;
};

/// `quota` tiles per slide. Each slide draws from its own substream keyed by
/// slide_id, so the result does not depend on slide order. Slides without
/// tiles are skipped and reported in `warnings`.
TileSample sample_tiles_per_slide(std::span<const SlideTiles> slides, int quota,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Baseline scorer

struct ModelMetadata {
  Stain stain = Stain::HE;
  MagLevel magnification = MagLevel::X40;
  std::uint64_t training_seed = 0;
  int epochs = 0;
  double learning_rate = 0.0;
  int sampling_number = 1;
  /// Architecture the scorer stands in for (documentation only).
  std::string reference_architecture;
  std::string reference_pooling;
};

/// Logistic tile scorer: score = sigmoid(weights . features + bias).
struct ScorerModel {
  std::string model_id;
  std::vector<double> weights;
  double bias = 0.0;
  ModelMetadata metadata;

  void validate() const;
};

double sigmoid(double z) noexcept;

/// sigmoid(w . x + b); throws on dimension mismatch.
double score_tile(const ScorerModel& model, std::span<const double> features);

inline double score_tile(const ScorerModel& model, const FeatureVector& features) {
  return score_tile(model, std::span<const double>(features));
}

/// Mean binary cross-entropy of a logistic model over (rows, labels).
double logistic_loss(std::span<const double> weights, double bias,
                     std::span<const FeatureVector> rows, std::span<const int> labels);

struct LossGradient {
  std::vector<double> weights;
  double bias = 0.0;
};

/// Analytic gradient of logistic_loss.
LossGradient logistic_gradient(std::span<const double> weights, double bias,
                               std::span<const FeatureVector> rows,
                               std::span<const int> labels);

/// Training input for one slide. `tiles[i]` holds feature variants of tile i:
/// variant 0 is the unaugmented tile, further entries are color-jittered
/// copies. Every tile inherits the slide label.
struct TrainingSlide {
  std::string slide_id;
  int label = 0;  // 1 = melanoma, 0 = nevus
  std::vector<std::vector<FeatureVector>> tiles;
};

struct TrainConfig {
  std::string model_id;
  Stain stain = Stain::HE;
  MagLevel magnification = MagLevel::X40;
  int epochs = 20;
  double learning_rate = 0.05;
  int quota = 64;  // "sampling number": tiles per slide per epoch
  int batch_size = 32;
  /// Draw a random feature variant per sampled tile (augmentation).
  bool use_variants = true;
  std::uint64_t seed = 0;
  std::string reference_architecture;
  std::string reference_pooling;
};

/// Mini-batch gradient descent on binary cross-entropy with per-epoch
/// resampling of `quota` tiles per slide. Features are standardized
/// internally and the standardization is folded back into the returned
/// weights. Weights start at zero. Fully deterministic given config.seed.
/// If `epoch_losses` is given it receives the mean loss over all variant-0
/// tiles after every epoch.
ScorerModel train_baseline_scorer(std::span<const TrainingSlide> slides,
                                  const TrainConfig& config,
                                  std::vector<double>* epoch_losses = nullptr);

void save_model(const std::filesystem::path& path, const ScorerModel& model);
ScorerModel load_model(const std::filesystem::path& path);
std::string model_to_json(const ScorerModel& model);
ScorerModel model_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Tile scores

struct TileScore {
  TileRef tile;
  double score = 0.0;
  std::string model_id;

  bool operator==(const TileScore&) const = default;
};

inline constexpr std::string_view kTileScoreHeader =
    "slide_id,stain,magnification,grid_x,grid_y,score,model_id";

void write_tile_scores(std::ostream& out, std::span<const TileScore> scores);
void write_tile_scores(const std::filesystem::path& path, std::span<const TileScore> scores);

/// Parses a tile-score CSV. Rows are numbered from 1 after the header; any
/// malformed or out-of-range row aborts with its number in the message.
std::vector<TileScore> read_tile_scores(std::istream& in);
std::vector<TileScore> import_external_scores(const std::filesystem::path& path);

}  // namespace stainfuse
