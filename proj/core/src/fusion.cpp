#include "stainfuse/fusion.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "stainfuse/error.hpp"

namespace stainfuse {

std::string_view to_string(FusionMode mode) noexcept {
  switch (mode) {
    case FusionMode::Unweighted: return "Unweighted";
    case FusionMode::ValidationWeighted: return "ValidationWeighted";
    case FusionMode::ThresholdDistanceWeighted: return "ThresholdDistanceWeighted";
  }
  return "Unweighted";
}

FusionMode parse_fusion_mode(std::string_view text) {
  for (FusionMode m : kAllFusionModes) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError(fmt::format("unknown fusion mode '{}'", text));
}

std::string_view to_string(FusionLayout layout) noexcept {
  return layout == FusionLayout::Flat ? "flat" : "two_level";
}

FusionLayout parse_fusion_layout(std::string_view text) {
  if (text == "flat") return FusionLayout::Flat;
  if (text == "two_level") return FusionLayout::TwoLevel;
  throw ConfigError(fmt::format("unknown fusion layout '{}' (flat | two_level)", text));
}

void FusionConfig::normalize() {
  std::set<std::string> seen;
  for (ModelCalibration& m : models) {
    if (!seen.insert(m.model_id).second) {
      throw ConfigError(fmt::format("fusion config: duplicate model_id '{}'", m.model_id));
    }
    if (!std::isfinite(m.threshold)) {
      throw ConfigError(fmt::format("fusion config: non-finite threshold for '{}'", m.model_id));
    }
    if (!(m.validation_auroc >= 0.0 && m.validation_auroc <= 1.0)) {
      throw ConfigError(fmt::format("fusion config: validation_auroc of '{}' outside [0, 1]",
                                    m.model_id));
    }
    m.threshold = std::clamp(m.threshold, kMinThreshold, kMaxThreshold);
  }
}

const ModelCalibration& FusionConfig::find(std::string_view model_id) const {
  for (const ModelCalibration& m : models) {
    if (m.model_id == model_id) return m;
  }
  throw Error(fmt::format("fusion: unknown model_id '{}'", model_id));
}

bool FusionConfig::contains(std::string_view model_id) const noexcept {
  return std::any_of(models.begin(), models.end(),
                     [&](const ModelCalibration& m) { return m.model_id == model_id; });
}

FusionConfig fusion_config_from_json(const std::string& text) {
  FusionConfig config;
  try {
    const nlohmann::json doc = nlohmann::json::parse(text);
    config.mode = parse_fusion_mode(doc.at("mode").get<std::string>());
    config.layout = parse_fusion_layout(doc.value("layout", std::string("flat")));
    for (const auto& m : doc.at("models")) {
      config.models.push_back({m.at("model_id").get<std::string>(),
                               m.at("threshold").get<double>(),
                               m.value("validation_auroc", 0.5)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fusion config: ") + e.what());
  }
  config.normalize();
  return config;
}

std::string fusion_config_to_json(const FusionConfig& config) {
  nlohmann::json models = nlohmann::json::array();
  for (const ModelCalibration& m : config.models) {
    models.push_back({{"model_id", m.model_id},
                      {"threshold", m.threshold},
                      {"validation_auroc", m.validation_auroc}});
  }
  const nlohmann::json doc = {{"mode", std::string(to_string(config.mode))},
                              {"layout", std::string(to_string(config.layout))},
                              {"models", std::move(models)}};
  return doc.dump(2);
}

FusionConfig read_fusion_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open fusion config '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fusion_config_from_json(text);
}

void write_fusion_config(const std::filesystem::path& path, const FusionConfig& config) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write fusion config '" + path.string() + "'");
  out << fusion_config_to_json(config) << '\n';
}

double calibrate_score(double score, double threshold) noexcept {
  const double t = std::clamp(threshold, kMinThreshold, kMaxThreshold);
  const double s = std::clamp(score, 0.0, 1.0);
  if (s <= t) return 0.5 * s / t;
  return 0.5 + 0.5 * (s - t) / (1.0 - t);
}

FusedPrediction fuse(std::span<const SlidePrediction> predictions, const FusionConfig& config) {
  if (predictions.empty()) throw Error("fuse: empty prediction list");

  // Canonical model order makes the weighted sum independent of input order.
  std::vector<const SlidePrediction*> ordered;
  for (const SlidePrediction& p : predictions) ordered.push_back(&p);
  std::sort(ordered.begin(), ordered.end(),
            [](const SlidePrediction* a, const SlidePrediction* b) { return a->model_id < b->model_id; });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->model_id == ordered[i - 1]->model_id) {
      throw Error(fmt::format("fuse: model '{}' given twice", ordered[i]->model_id));
    }
  }

  const std::size_t n = ordered.size();
  std::vector<double> calibrated(n), weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ModelCalibration& cal = config.find(ordered[i]->model_id);
    calibrated[i] = calibrate_score(ordered[i]->score, cal.threshold);
    switch (config.mode) {
      case FusionMode::Unweighted: weights[i] = 1.0; break;
      case FusionMode::ValidationWeighted:
        weights[i] = std::max(cal.validation_auroc - 0.5, 0.0);
        break;
      case FusionMode::ThresholdDistanceWeighted:
        weights[i] = std::abs(calibrated[i] - 0.5);
        break;
    }
  }

  FusedPrediction out;
  out.slide_id = ordered.front()->slide_id;
  out.mode = config.mode;
  const bool all_vanished = std::all_of(weights.begin(), weights.end(),
                                        [](double w) { return w <= kWeightEpsilon; });
  if (all_vanished) {
    std::fill(weights.begin(), weights.end(), 1.0);
    out.fallback = config.mode != FusionMode::Unweighted;
  }
  double total = 0.0;
  for (double w : weights) total += w;
  double score = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    weights[i] /= total;
    score += weights[i] * calibrated[i];
    out.contributions.emplace_back(ordered[i]->model_id, weights[i]);
  }
  const auto [lo, hi] = std::minmax_element(calibrated.begin(), calibrated.end());
  out.score = std::clamp(score, *lo, *hi);
  return out;
}

FusedPrediction fuse_multimodal(const SlidePrediction& he, std::span<const SlidePrediction> melana,
                                const FusionConfig& config) {
  if (config.layout == FusionLayout::Flat) {
    std::vector<SlidePrediction> pool;
    pool.reserve(melana.size() + 1);
    pool.push_back(he);
    pool.insert(pool.end(), melana.begin(), melana.end());
    return fuse(pool, config);
  }

  if (melana.empty()) return fuse(std::span<const SlidePrediction>(&he, 1), config);
  const FusedPrediction inner = fuse(melana, config);
  double mean_auroc = 0.0;
  for (const SlidePrediction& p : melana) mean_auroc += config.find(p.model_id).validation_auroc;
  mean_auroc /= static_cast<double>(melana.size());

  SlidePrediction combined = to_slide_prediction(inner, Stain::MelanA, "fused:MelanA");
  FusionConfig outer;
  outer.mode = config.mode;
  outer.layout = FusionLayout::Flat;
  outer.models = {config.find(he.model_id), {combined.model_id, 0.5, mean_auroc}};
  const SlidePrediction pair[] = {he, combined};
  FusedPrediction result = fuse(pair, outer);
  result.fallback = result.fallback || inner.fallback;
  return result;
}

FusedPrediction hierarchical_predict(const SlidePrediction& he, double he_threshold,
                                     std::span<const SlidePrediction> melana,
                                     const FusionConfig& config) {
  if (!he.ci) {
    throw Error(fmt::format("hierarchical gate: slide '{}' has no H&E confidence interval",
                            he.slide_id));
  }
  const bool uncertain = he_threshold >= he.ci->low && he_threshold <= he.ci->high;
  if (!uncertain) {
    FusedPrediction out;
    out.slide_id = he.slide_id;
    out.mode = config.mode;
    out.score = calibrate_score(he.score, he_threshold);
    out.contributions = {{he.model_id, 1.0}};
    return out;
  }
  return fuse_multimodal(he, melana, config);
}

SlidePrediction to_slide_prediction(const FusedPrediction& fused, Stain stain,
                                    std::string model_id) {
  SlidePrediction p;
  p.slide_id = fused.slide_id;
  p.stain = stain;
  p.model_id = model_id.empty() ? fmt::format("fused:{}", to_string(fused.mode)) : std::move(model_id);
  p.score = fused.score;
  p.n_tiles = 0;
  return p;
}

}  // namespace stainfuse
