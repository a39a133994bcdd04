#include "stainfuse/tessellation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

#include "json.hpp"
#include "stainfuse/csv.hpp"
#include "stainfuse/error.hpp"

namespace stainfuse {

double mag_resolution(MagLevel level) noexcept {
  switch (level) {
    case MagLevel::X40: return 0.25;
    case MagLevel::X20: return 0.5;
    case MagLevel::X10: return 1.0;
    case MagLevel::X5: return 2.0;
  }
  return 0.25;
}

double tile_physical_edge(MagLevel level) noexcept {
  return kTileEdgePx * mag_resolution(level);
}

double tile_nominal_edge(MagLevel level) noexcept {
  switch (level) {
    case MagLevel::X40: return 60.0;
    case MagLevel::X20: return 120.0;
    case MagLevel::X10: return 240.0;
    case MagLevel::X5: return 480.0;
  }
  return 60.0;
}

std::string_view to_string(MagLevel level) noexcept {
  switch (level) {
    case MagLevel::X40: return "X40";
    case MagLevel::X20: return "X20";
    case MagLevel::X10: return "X10";
    case MagLevel::X5: return "X5";
  }
  return "X40";
}

MagLevel parse_mag_level(std::string_view text) {
  for (MagLevel level : kAllMagLevels) {
    if (text == to_string(level)) return level;
  }
  // Accept the lowercase "40x" style as well.
  if (text == "40x") return MagLevel::X40;
  if (text == "20x") return MagLevel::X20;
  if (text == "10x") return MagLevel::X10;
  if (text == "5x") return MagLevel::X5;
  throw ConfigError(fmt::format("unknown magnification '{}'", text));
}

std::optional<MagLevel> level_for_resolution(double um_per_px) noexcept {
  for (MagLevel level : kAllMagLevels) {
    if (um_per_px == mag_resolution(level)) return level;
  }
  return std::nullopt;
}

std::string_view to_string(Stain stain) noexcept {
  return stain == Stain::HE ? "HE" : "MelanA";
}

Stain parse_stain(std::string_view text) {
  if (text == "HE" || text == "H&E") return Stain::HE;
  if (text == "MelanA") return Stain::MelanA;
  throw ConfigError(fmt::format("unknown stain '{}'", text));
}

void AnnotationMask::validate() const {
  for (std::size_t i = 0; i < polygons.size(); ++i) {
    const Polygon& poly = polygons[i];
    if (poly.size() < 3) {
      throw ConfigError(fmt::format("annotation '{}': polygon {} has {} vertices (need >= 3)",
                                    slide_id, i, poly.size()));
    }
    for (const Point& p : poly) {
      if (!(p.x >= 0.0) || !(p.y >= 0.0) || !std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw ConfigError(fmt::format(
            "annotation '{}': polygon {} has a negative or non-finite vertex", slide_id, i));
      }
    }
  }
}

SlideImage downscale(const SlideImage& image, MagLevel target) {
  const double target_um = mag_resolution(target);
  const double ratio_real = target_um / image.um_per_px;
  const int ratio = static_cast<int>(std::lround(ratio_real));
  if (ratio < 1 || std::abs(ratio_real - ratio) > 1e-9 || (ratio & (ratio - 1)) != 0) {
    throw ConfigError(fmt::format(
        "cannot downscale slide '{}' from {} to {} um/px: ratio must be a power of two >= 1",
        image.slide_id, image.um_per_px, target_um));
  }

  SlideImage out;
  out.slide_id = image.slide_id;
  out.stain = image.stain;
  out.um_per_px = target_um;
  if (ratio == 1) {
    out.pixels = image.pixels;
    return out;
  }

  const int w = image.width() / ratio;
  const int h = image.height() / ratio;
  out.pixels = RgbImage(w, h);
  const unsigned block = static_cast<unsigned>(ratio * ratio);
  std::vector<unsigned> row_sums(static_cast<std::size_t>(w) * 3);
  for (int oy = 0; oy < h; ++oy) {
    std::fill(row_sums.begin(), row_sums.end(), 0u);
    for (int dy = 0; dy < ratio; ++dy) {
      const std::uint8_t* src = image.pixels.at(0, oy * ratio + dy);
      for (int ox = 0; ox < w; ++ox) {
        const std::uint8_t* p = src + static_cast<std::size_t>(ox) * ratio * 3;
        unsigned* acc = &row_sums[static_cast<std::size_t>(ox) * 3];
        for (int dx = 0; dx < ratio; ++dx, p += 3) {
          acc[0] += p[0];
          acc[1] += p[1];
          acc[2] += p[2];
        }
      }
    }
    std::uint8_t* dst = out.pixels.at(0, oy);
    for (std::size_t i = 0; i < row_sums.size(); ++i) {
      dst[i] = static_cast<std::uint8_t>((row_sums[i] + block / 2) / block);
    }
  }
  return out;
}

namespace {

// Marks pixel columns whose center (in base coordinates) lies in [lo, hi].
void fill_span(std::uint8_t* row, int width, double lo, double hi, double scale) {
  // center of column c is (c + 0.5) * scale
  const int first = std::max(0, static_cast<int>(std::ceil(lo / scale - 0.5)));
  const int last = std::min(width - 1, static_cast<int>(std::floor(hi / scale - 0.5)));
  for (int c = first; c <= last; ++c) row[c] = 1;
}

}  // namespace

std::vector<std::uint8_t> rasterize_mask(const AnnotationMask& mask, int width, int height,
                                         double base_px_per_px) {
  std::vector<std::uint8_t> raster(static_cast<std::size_t>(std::max(0, width)) *
                                       std::max(0, height),
                                   0);
  if (width <= 0 || height <= 0) return raster;
  const double scale = base_px_per_px;
  std::vector<double> crossings;

  for (const Polygon& poly : mask.polygons) {
    if (poly.size() < 3) continue;
    double min_y = poly[0].y, max_y = poly[0].y;
    for (const Point& p : poly) {
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
    const int row_lo = std::max(0, static_cast<int>(std::floor(min_y / scale - 0.5)));
    const int row_hi = std::min(height - 1, static_cast<int>(std::ceil(max_y / scale - 0.5)));

    for (int r = row_lo; r <= row_hi; ++r) {
      const double cy = (r + 0.5) * scale;
      std::uint8_t* row = raster.data() + static_cast<std::size_t>(r) * width;
      crossings.clear();
      const std::size_t n = poly.size();
      for (std::size_t i = 0; i < n; ++i) {
        const Point& a = poly[i];
        const Point& b = poly[(i + 1) % n];
        if (a.y == cy && b.y == cy) {
          // Horizontal edge on the scanline: boundary pixels count as inside.
          fill_span(row, width, std::min(a.x, b.x), std::max(a.x, b.x), scale);
          continue;
        }
        if ((a.y <= cy) != (b.y <= cy)) {
          crossings.push_back(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
        }
        if (a.y == cy) fill_span(row, width, a.x, a.x, scale);  // vertex on scanline
      }
      std::sort(crossings.begin(), crossings.end());
      for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
        fill_span(row, width, crossings[k], crossings[k + 1], scale);
      }
    }
  }
  return raster;
}

std::vector<TileRef> tessellate(const SlideImage& image, const AnnotationMask& mask,
                                MagLevel level, const TessellationOptions& options) {
  if (image.um_per_px != mag_resolution(level)) {
    throw ConfigError(fmt::format(
        "slide '{}' is at {} um/px but tessellation at {} needs {} um/px; downscale first",
        image.slide_id, image.um_per_px, to_string(level), mag_resolution(level)));
  }
  mask.validate();

  std::vector<TileRef> tiles;
  const int cols = image.width() / kTileEdgePx;
  const int rows = image.height() / kTileEdgePx;
  if (cols == 0 || rows == 0 || mask.polygons.empty()) return tiles;

  const int w = cols * kTileEdgePx;
  const int h = rows * kTileEdgePx;
  const double scale = image.um_per_px / kBaseUmPerPx;
  const std::vector<std::uint8_t> raster = rasterize_mask(mask, w, h, scale);

  std::vector<long> counts(static_cast<std::size_t>(cols) * rows, 0);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* row = raster.data() + static_cast<std::size_t>(y) * w;
    long* row_counts = counts.data() + static_cast<std::size_t>(y / kTileEdgePx) * cols;
    for (int x = 0; x < w; ++x) row_counts[x / kTileEdgePx] += row[x];
  }

  const double tile_area = static_cast<double>(kTileEdgePx) * kTileEdgePx;
  for (int gy = 0; gy < rows; ++gy) {
    for (int gx = 0; gx < cols; ++gx) {
      const double coverage = counts[static_cast<std::size_t>(gy) * cols + gx] / tile_area;
      if (coverage + 1e-12 < options.min_coverage) continue;
      TileRef tile;
      tile.slide_id = image.slide_id;
      tile.stain = image.stain;
      tile.magnification = level;
      tile.grid_x = gx;
      tile.grid_y = gy;
      tile.origin_x = gx * kTileEdgePx;
      tile.origin_y = gy * kTileEdgePx;
      tiles.push_back(std::move(tile));
    }
  }
  return tiles;
}

RgbImage extract_tile(const SlideImage& image, const TileRef& tile) {
  return crop(image.pixels, tile.origin_x, tile.origin_y, tile.edge_px, tile.edge_px);
}

std::string tile_png_name(const TileRef& tile) {
  return fmt::format("{}_{}_{}_{}.png", tile.slide_id, to_string(tile.magnification),
                     tile.grid_x, tile.grid_y);
}

AnnotationMask read_annotation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open annotation '" + path.string() + "'");
  AnnotationMask mask;
  try {
    const nlohmann::json doc = nlohmann::json::parse(in);
    mask.slide_id = doc.at("slide_id").get<std::string>();
    for (const auto& poly_json : doc.at("polygons")) {
      Polygon poly;
      for (const auto& pt : poly_json) {
        if (!pt.is_array() || pt.size() != 2) {
          throw ConfigError("vertex must be a [x, y] pair");
        }
        poly.push_back({pt[0].get<double>(), pt[1].get<double>()});
      }
      mask.polygons.push_back(std::move(poly));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("annotation '" + path.string() + "': " + e.what());
  }
  mask.validate();
  return mask;
}

void write_annotation(const std::filesystem::path& path, const AnnotationMask& mask) {
  nlohmann::json polygons = nlohmann::json::array();
  for (const Polygon& poly : mask.polygons) {
    nlohmann::json pts = nlohmann::json::array();
    for (const Point& p : poly) pts.push_back({p.x, p.y});
    polygons.push_back(std::move(pts));
  }
  const nlohmann::json doc = {{"slide_id", mask.slide_id}, {"polygons", std::move(polygons)}};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write annotation '" + path.string() + "'");
  out << doc.dump() << '\n';
}

void write_tile_manifest(std::ostream& out, const std::vector<TileRef>& tiles) {
  out << kTileManifestHeader << '\n';
  for (const TileRef& t : tiles) {
    out << t.slide_id << ',' << to_string(t.stain) << ',' << to_string(t.magnification) << ','
        << t.grid_x << ',' << t.grid_y << ',' << t.origin_x << ',' << t.origin_y << ','
        << t.edge_px << '\n';
  }
}

std::vector<TileRef> read_tile_manifest(std::istream& in) {
  csv::expect_header(in, kTileManifestHeader, "tile manifest");
  std::vector<TileRef> tiles;
  std::string line;
  std::size_t row = 0;
  while (csv::read_line(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    const std::string what = fmt::format("tile manifest row {}", row);
    if (f.size() != 8) throw ConfigError(what + ": expected 8 fields");
    TileRef t;
    t.slide_id = f[0];
    t.stain = parse_stain(f[1]);
    t.magnification = parse_mag_level(f[2]);
    t.grid_x = static_cast<int>(csv::parse_int(f[3], what));
    t.grid_y = static_cast<int>(csv::parse_int(f[4], what));
    t.origin_x = static_cast<int>(csv::parse_int(f[5], what));
    t.origin_y = static_cast<int>(csv::parse_int(f[6], what));
    t.edge_px = static_cast<int>(csv::parse_int(f[7], what));
    tiles.push_back(std::move(t));
  }
  return tiles;
}

}  // namespace stainfuse
