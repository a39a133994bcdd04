#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace stainfuse {

/// Interleaved 8-bit RGB raster, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * width + x) * 3;
  }
  std::uint8_t* at(int x, int y) { return pixels.data() + offset(x, y); }
  const std::uint8_t* at(int x, int y) const { return pixels.data() + offset(x, y); }

  bool operator==(const RgbImage&) const = default;
};

/// Copies the w x h region with top-left corner (x, y). Region must be in bounds.
RgbImage crop(const RgbImage& image, int x, int y, int w, int h);

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

// HSV helpers shared by feature extraction, jitter and synthesis. All
// components in [0, 1]; hue wraps.
struct Hsv {
  double h, s, v;
};
Hsv rgb_to_hsv(double r, double g, double b) noexcept;
void hsv_to_rgb(const Hsv& hsv, double& r, double& g, double& b) noexcept;

}  // namespace stainfuse
