#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "stainfuse/image.hpp"

namespace stainfuse {

inline constexpr int kHistogramBins = 8;

/// Layout of a tile feature vector.
///   [0, 8)   hue histogram
///   [8, 16)  saturation histogram
///   [16, 24) value histogram
///   [24, 27) mean R, G, B (0..255)
///   [27, 30) population std-dev of R, G, B
inline constexpr std::size_t kFeatureDim = 3 * kHistogramBins + 6;
inline constexpr std::size_t kHueOffset = 0;
inline constexpr std::size_t kSaturationOffset = kHistogramBins;
inline constexpr std::size_t kValueOffset = 2 * kHistogramBins;
inline constexpr std::size_t kMeanOffset = 3 * kHistogramBins;
inline constexpr std::size_t kStdOffset = kMeanOffset + 3;

using FeatureVector = std::array<double, kFeatureDim>;

/// Deterministic color descriptor of a 237x237 tile. Throws on other sizes.
FeatureVector extract_features(const RgbImage& tile);

/// Maximum perturbation magnitudes. Brightness, contrast and saturation
/// factors are drawn from [1 - m, 1 + m]; hue is shifted by up to +-hue of
/// the full circle.
struct JitterParams {
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.05;

  void validate() const;
  bool is_identity() const noexcept {
    return brightness == 0.0 && contrast == 0.0 && saturation == 0.0 && hue == 0.0;
  }
};

/// One concrete draw of jitter factors.
struct JitterDraw {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue_shift = 0.0;  // fraction of the hue circle
};

JitterDraw draw_jitter(const JitterParams& params, std::uint64_t seed);

/// Applies brightness -> contrast -> saturation -> hue, clamping to [0, 255]
/// after every step.
RgbImage apply_jitter(const RgbImage& image, const JitterDraw& draw);

inline RgbImage color_jitter(const RgbImage& image, const JitterParams& params,
                             std::uint64_t seed) {
  params.validate();
  return apply_jitter(image, draw_jitter(params, seed));
}

}  // namespace stainfuse
