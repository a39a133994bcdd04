#include "stainfuse/aggregation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>

#include "stainfuse/csv.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/parallel.hpp"
#include "stainfuse/random.hpp"

namespace stainfuse {

std::string_view to_string(BinaryLabel label) noexcept {
  return label == BinaryLabel::Melanoma ? "melanoma" : "nevus";
}

BinaryLabel parse_binary_label(std::string_view text) {
  if (text == "melanoma") return BinaryLabel::Melanoma;
  if (text == "nevus") return BinaryLabel::Nevus;
  throw ConfigError(fmt::format("unknown label '{}' (expected melanoma or nevus)", text));
}

void BootstrapConfig::validate() const {
  if (n_boot < 1) throw ConfigError("n_boot must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
}

double quantile_linear(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

SlidePrediction aggregate_slide(std::span<const TileScore> tiles) {
  if (tiles.empty()) throw Error("slide has no tiles");
  SlidePrediction p;
  p.slide_id = tiles.front().tile.slide_id;
  p.stain = tiles.front().tile.stain;
  p.model_id = tiles.front().model_id;
  double sum = 0.0;
  for (const TileScore& t : tiles) {
    if (t.tile.slide_id != p.slide_id || t.model_id != p.model_id) {
      throw Error("aggregate_slide: tiles from different slides or models");
    }
    sum += t.score;
  }
  p.n_tiles = static_cast<int>(tiles.size());
  p.score = sum / static_cast<double>(tiles.size());
  return p;
}

ConfidenceInterval slide_score_ci(std::span<const double> scores, const BootstrapConfig& config,
                                  unsigned workers) {
  config.validate();
  if (scores.empty()) throw Error("slide has no tiles");
  const std::size_t n = scores.size();
  std::vector<double> means(static_cast<std::size_t>(config.n_boot));
  parallel_for(means.size(), workers, [&](std::size_t r) {
    Engine engine = make_engine(config.seed, 0, r);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += scores[pick(engine)];
    means[r] = sum / static_cast<double>(n);
  });
  std::sort(means.begin(), means.end());
  ConfidenceInterval ci;
  ci.low = quantile_linear(means, config.alpha / 2.0);
  ci.high = quantile_linear(means, 1.0 - config.alpha / 2.0);
  ci.n_boot = config.n_boot;
  ci.seed = config.seed;
  return ci;
}

std::vector<SlidePrediction> aggregate_tile_scores(std::span<const TileScore> scores,
                                                   const std::optional<BootstrapConfig>& bootstrap,
                                                   unsigned workers) {
  std::map<std::pair<std::string, std::string>, std::vector<TileScore>> groups;
  for (const TileScore& s : scores) groups[{s.model_id, s.tile.slide_id}].push_back(s);

  std::vector<const std::vector<TileScore>*> ordered;
  ordered.reserve(groups.size());
  for (const auto& [key, tiles] : groups) ordered.push_back(&tiles);

  std::vector<SlidePrediction> out(ordered.size());
  // Parallel over slides; each slide's bootstrap runs single-threaded.
  parallel_for(ordered.size(), workers, [&](std::size_t i) {
    const auto& tiles = *ordered[i];
    SlidePrediction p = aggregate_slide(tiles);
    if (bootstrap) {
      BootstrapConfig cfg = *bootstrap;
      cfg.seed = mix_seed(bootstrap->seed, stream_id(p.model_id), stream_id(p.slide_id));
      std::vector<double> values;
      values.reserve(tiles.size());
      for (const TileScore& t : tiles) values.push_back(t.score);
      p.ci = slide_score_ci(values, cfg, 1);
    }
    out[i] = std::move(p);
  });
  return out;
}

void write_slide_predictions(std::ostream& out, std::span<const SlidePrediction> predictions) {
  out << kSlidePredictionHeader << '\n';
  for (const SlidePrediction& p : predictions) {
    out << p.slide_id << ',' << to_string(p.stain) << ',' << p.model_id << ','
        << csv::format_double(p.score) << ',' << p.n_tiles << ',';
    if (p.ci) out << csv::format_double(p.ci->low) << ',' << csv::format_double(p.ci->high);
    else out << ',';
    out << ',';
    if (p.label) out << to_string(*p.label);
    out << '\n';
  }
}

void write_slide_predictions(const std::filesystem::path& path,
                             std::span<const SlidePrediction> predictions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write slide predictions '" + path.string() + "'");
  write_slide_predictions(out, predictions);
}

std::vector<SlidePrediction> read_slide_predictions(std::istream& in) {
  csv::expect_header(in, kSlidePredictionHeader, "slide-prediction CSV");
  std::vector<SlidePrediction> out;
  std::string line;
  std::size_t row = 0;
  while (csv::read_line(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string what = fmt::format("slide-prediction CSV row {}", row);
    const auto f = csv::split(line);
    if (f.size() != 8) throw ConfigError(fmt::format("{}: expected 8 fields, got {}", what, f.size()));
    SlidePrediction p;
    p.slide_id = f[0];
    p.stain = parse_stain(f[1]);
    p.model_id = f[2];
    p.score = csv::parse_double(f[3], what);
    if (p.score < 0.0 || p.score > 1.0) throw ConfigError(what + ": score outside [0, 1]");
    p.n_tiles = static_cast<int>(csv::parse_int(f[4], what));
    if (f[5].empty() != f[6].empty()) throw ConfigError(what + ": half-empty CI");
    if (!f[5].empty()) {
      ConfidenceInterval ci;
      ci.low = csv::parse_double(f[5], what);
      ci.high = csv::parse_double(f[6], what);
      if (ci.low > ci.high) throw ConfigError(what + ": ci_low > ci_high");
      p.ci = ci;
    }
    if (!f[7].empty()) p.label = parse_binary_label(f[7]);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<SlidePrediction> read_slide_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open slide predictions '" + path.string() + "'");
  return read_slide_predictions(in);
}

}  // namespace stainfuse
