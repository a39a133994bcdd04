#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stainfuse/image.hpp"

namespace stainfuse {

/// Nominal objective magnification of a tile grid.
enum class MagLevel { X40, X20, X10, X5 };

inline constexpr std::array<MagLevel, 4> kAllMagLevels = {MagLevel::X40, MagLevel::X20,
                                                          MagLevel::X10, MagLevel::X5};

/// Tile edge length in pixels at every magnification.
inline constexpr int kTileEdgePx = 237;

/// Resolution of the scanner's native (X40) level.
inline constexpr double kBaseUmPerPx = 0.25;

/// Micrometers per pixel: 0.25, 0.5, 1.0, 2.0 for X40, X20, X10, X5.
double mag_resolution(MagLevel level) noexcept;

/// Physical tile edge in micrometers, 237 px times the level's resolution.
double tile_physical_edge(MagLevel level) noexcept;

/// Rounded edge figures used in the literature (60/120/240/480 um). Reporting only.
double tile_nominal_edge(MagLevel level) noexcept;

std::string_view to_string(MagLevel level) noexcept;
MagLevel parse_mag_level(std::string_view text);
std::optional<MagLevel> level_for_resolution(double um_per_px) noexcept;

enum class Stain { HE, MelanA };
std::string_view to_string(Stain stain) noexcept;
Stain parse_stain(std::string_view text);

struct SlideImage {
  std::string slide_id;
  Stain stain = Stain::HE;
  double um_per_px = kBaseUmPerPx;
  RgbImage pixels;

  int width() const noexcept { return pixels.width; }
  int height() const noexcept { return pixels.height; }
};

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

using Polygon = std::vector<Point>;

/// Tumor outline in base-resolution (X40) pixel coordinates.
struct AnnotationMask {
  std::string slide_id;
  std::vector<Polygon> polygons;

  /// Throws ConfigError unless every polygon has >= 3 non-negative vertices.
  void validate() const;
};

struct TileRef {
  std::string slide_id;
  Stain stain = Stain::HE;
  MagLevel magnification = MagLevel::X40;
  int grid_x = 0;
  int grid_y = 0;
  int origin_x = 0;  // pixels at the tile's own magnification
  int origin_y = 0;
  int edge_px = kTileEdgePx;

  bool operator==(const TileRef&) const = default;
};

struct TessellationOptions {
  /// Minimum fraction of tile area inside the annotation for a tile to be kept.
  double min_coverage = 0.5;
};

/// Box-filter downsampling to a coarser magnification. The resolution ratio
/// must be a power of two >= 1; output dimensions are floor(input / ratio) and
/// each channel is the rounded (half-up) block mean.
SlideImage downscale(const SlideImage& image, MagLevel target);

/// Rasterizes the mask onto a width x height grid whose pixels are
/// `base_px_per_px` base pixels wide. A pixel is set when its center lies
/// inside any polygon (even-odd rule per polygon, union across polygons) or
/// on a polygon edge.
std::vector<std::uint8_t> rasterize_mask(const AnnotationMask& mask, int width, int height,
                                         double base_px_per_px);

/// Non-overlapping 237 px grid anchored at (0, 0). Keeps tiles that fit fully
/// inside the image and whose mask coverage reaches options.min_coverage.
/// Output is row-major by (grid_y, grid_x).
std::vector<TileRef> tessellate(const SlideImage& image, const AnnotationMask& mask,
                                MagLevel level, const TessellationOptions& options = {});

RgbImage extract_tile(const SlideImage& image, const TileRef& tile);

/// `<slide_id>_<mag>_<grid_x>_<grid_y>.png`
std::string tile_png_name(const TileRef& tile);

AnnotationMask read_annotation(const std::filesystem::path& path);
void write_annotation(const std::filesystem::path& path, const AnnotationMask& mask);

inline constexpr std::string_view kTileManifestHeader =
    "slide_id,stain,magnification,grid_x,grid_y,origin_x,origin_y,edge_px";

void write_tile_manifest(std::ostream& out, const std::vector<TileRef>& tiles);
std::vector<TileRef> read_tile_manifest(std::istream& in);

}  // namespace stainfuse
