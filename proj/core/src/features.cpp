#include "stainfuse/features.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "stainfuse/error.hpp"
#include "stainfuse/random.hpp"
#include "stainfuse/tessellation.hpp"

namespace stainfuse {

FeatureVector extract_features(const RgbImage& tile) {
  if (tile.width != kTileEdgePx || tile.height != kTileEdgePx) {
    throw Error(fmt::format("feature extraction needs a {0}x{0} tile, got {1}x{2}",
                            kTileEdgePx, tile.width, tile.height));
  }
  std::array<long, kHistogramBins> hue{}, sat{}, val{};
  std::array<double, 3> sum{}, sum_sq{};

  const std::uint8_t* p = tile.pixels.data();
  const std::size_t n = static_cast<std::size_t>(tile.width) * tile.height;
  for (std::size_t i = 0; i < n; ++i, p += 3) {
    const int r = p[0], g = p[1], b = p[2];
    const int mx = std::max({r, g, b});
    const int mn = std::min({r, g, b});
    const int delta = mx - mn;
    ++val[std::min(kHistogramBins - 1, mx * kHistogramBins / 255)];
    ++sat[mx == 0 ? 0 : std::min(kHistogramBins - 1, delta * kHistogramBins / mx)];
    int hue_bin = 0;
    if (delta > 0) {
      const double h = rgb_to_hsv(r, g, b).h;
      hue_bin = std::min(kHistogramBins - 1, static_cast<int>(h * kHistogramBins));
    }
    ++hue[hue_bin];
    for (int c = 0; c < 3; ++c) {
      sum[c] += p[c];
      sum_sq[c] += static_cast<double>(p[c]) * p[c];
    }
  }

  FeatureVector f{};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int k = 0; k < kHistogramBins; ++k) {
    f[kHueOffset + k] = hue[k] * inv_n;
    f[kSaturationOffset + k] = sat[k] * inv_n;
    f[kValueOffset + k] = val[k] * inv_n;
  }
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] * inv_n;
    f[kMeanOffset + c] = mean;
    f[kStdOffset + c] = std::sqrt(std::max(0.0, sum_sq[c] * inv_n - mean * mean));
  }
  return f;
}

void JitterParams::validate() const {
  for (double m : {brightness, contrast, saturation, hue}) {
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("jitter magnitudes must lie in [0, 1]");
  }
  if (hue > 0.5) throw ConfigError("hue jitter must be <= 0.5");
}

JitterDraw draw_jitter(const JitterParams& params, std::uint64_t seed) {
  Engine engine(seed);
  JitterDraw d;
  d.brightness = uniform(engine, 1.0 - params.brightness, 1.0 + params.brightness);
  d.contrast = uniform(engine, 1.0 - params.contrast, 1.0 + params.contrast);
  d.saturation = uniform(engine, 1.0 - params.saturation, 1.0 + params.saturation);
  d.hue_shift = uniform(engine, -params.hue, params.hue);
  return d;
}

namespace {

inline double clamp255(double x) { return std::clamp(x, 0.0, 255.0); }
inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace

RgbImage apply_jitter(const RgbImage& image, const JitterDraw& draw) {
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  std::vector<double> px(image.pixels.begin(), image.pixels.end());

  if (draw.brightness != 1.0) {
    for (double& x : px) x = clamp255(x * draw.brightness);
  }
  if (draw.contrast != 1.0 && n > 0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
    mean /= static_cast<double>(n);
    for (double& x : px) x = clamp255((x - mean) * draw.contrast + mean);
  }
  if (draw.saturation != 1.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double* p = &px[3 * i];
      const double gray = luma(p[0], p[1], p[2]);
      for (int c = 0; c < 3; ++c) p[c] = clamp255((p[c] - gray) * draw.saturation + gray);
    }
  }
  if (draw.hue_shift != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double* p = &px[3 * i];
      Hsv hsv = rgb_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
      hsv.h += draw.hue_shift;
      double r, g, b;
      hsv_to_rgb(hsv, r, g, b);
      p[0] = clamp255(r * 255.0);
      p[1] = clamp255(g * 255.0);
      p[2] = clamp255(b * 255.0);
    }
  }

  RgbImage out(image.width, image.height);
  for (std::size_t i = 0; i < px.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::floor(px[i] + 0.5));
  }
  return out;
}

}  // namespace stainfuse
