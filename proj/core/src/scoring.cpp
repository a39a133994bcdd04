#include "stainfuse/scoring.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "stainfuse/csv.hpp"
#include "stainfuse/error.hpp"

namespace stainfuse {

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t quota, Engine& engine) {
  if (n == 0) throw Error("cannot sample from an empty set");
  std::vector<std::size_t> out;
  out.reserve(quota);
  if (n >= quota) {
    // Partial Fisher-Yates.
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < quota; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(pool[i], pool[pick(engine)]);
      out.push_back(pool[i]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < quota; ++i) out.push_back(pick(engine));
  }
  return out;
}

TileSample sample_tiles_per_slide(std::span<const SlideTiles> slides, int quota,
                                  std::uint64_t seed) {
  if (quota < 1) throw ConfigError("sampling quota must be >= 1");
  TileSample result;
  for (const SlideTiles& slide : slides) {
    if (slide.tiles.empty()) {
      result.warnings.push_back({slide.slide_id, "slide has no tiles; skipped"});
      continue;
    }
    Engine engine = make_engine(seed, stream_id(slide.slide_id));
    for (std::size_t i : sample_indices(slide.tiles.size(), static_cast<std::size_t>(quota), engine)) {
      result.tiles.push_back(slide.tiles[i]);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

void ScorerModel::validate() const {
  if (weights.size() != kFeatureDim) {
    throw ConfigError(fmt::format("model '{}': expected {} weights, got {}", model_id,
                                  kFeatureDim, weights.size()));
  }
  for (double w : weights) {
    if (!std::isfinite(w)) throw ConfigError(fmt::format("model '{}': non-finite weight", model_id));
  }
  if (!std::isfinite(bias)) throw ConfigError(fmt::format("model '{}': non-finite bias", model_id));
  if (metadata.sampling_number < 1) {
    throw ConfigError(fmt::format("model '{}': sampling_number must be >= 1", model_id));
  }
}

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

double dot(std::span<const double> w, std::span<const double> x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x[i];
  return acc;
}

// log(1 + exp(z)) without overflow.
double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

void check_rows(std::span<const double> weights, std::span<const FeatureVector> rows,
                std::span<const int> labels) {
  if (weights.size() != kFeatureDim) throw Error("weight dimension mismatch");
  if (rows.size() != labels.size()) throw Error("rows and labels differ in length");
  if (rows.empty()) throw Error("loss over an empty batch");
}

}  // namespace

double score_tile(const ScorerModel& model, std::span<const double> features) {
  if (features.size() != model.weights.size()) {
    throw Error(fmt::format("model '{}' expects {} features, got {}", model.model_id,
                            model.weights.size(), features.size()));
  }
  return sigmoid(dot(model.weights, features) + model.bias);
}

double logistic_loss(std::span<const double> weights, double bias,
                     std::span<const FeatureVector> rows, std::span<const int> labels) {
  check_rows(weights, rows, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double z = dot(weights, rows[i]) + bias;
    // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    total += softplus(z) - (labels[i] ? z : 0.0);
  }
  return total / static_cast<double>(rows.size());
}

LossGradient logistic_gradient(std::span<const double> weights, double bias,
                               std::span<const FeatureVector> rows,
                               std::span<const int> labels) {
  check_rows(weights, rows, labels);
  LossGradient g;
  g.weights.assign(kFeatureDim, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double residual = sigmoid(dot(weights, rows[i]) + bias) - (labels[i] ? 1.0 : 0.0);
    for (std::size_t k = 0; k < kFeatureDim; ++k) g.weights[k] += residual * rows[i][k];
    g.bias += residual;
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& w : g.weights) w *= inv;
  g.bias *= inv;
  return g;
}

ScorerModel train_baseline_scorer(std::span<const TrainingSlide> slides,
                                  const TrainConfig& config,
                                  std::vector<double>* epoch_losses) {
  if (config.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (config.quota < 1) throw ConfigError("sampling number must be >= 1");
  if (config.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }

  bool has_pos = false, has_neg = false;
  for (const TrainingSlide& s : slides) {
    if (s.tiles.empty()) continue;
    (s.label ? has_pos : has_neg) = true;
    for (const auto& variants : s.tiles) {
      if (variants.empty()) throw Error(fmt::format("slide '{}': tile without features", s.slide_id));
    }
  }
  if (!has_pos || !has_neg) throw Error("degenerate training set: need slides of both classes");

  // Standardization statistics over every feature row training can draw:
  // all variants when augmentation is on, else the unaugmented tiles.
  std::array<double, kFeatureDim> mean{}, scale{};
  std::size_t n_rows = 0;
  auto for_each_row = [&](auto&& fn) {
    for (const TrainingSlide& s : slides) {
      for (const auto& v : s.tiles) {
        const std::size_t n = config.use_variants ? v.size() : 1;
        for (std::size_t i = 0; i < n; ++i) fn(v[i]);
      }
    }
  };
  for_each_row([&](const FeatureVector& x) {
    for (std::size_t k = 0; k < kFeatureDim; ++k) mean[k] += x[k];
    ++n_rows;
  });
  for (double& m : mean) m /= static_cast<double>(n_rows);
  for_each_row([&](const FeatureVector& x) {
    for (std::size_t k = 0; k < kFeatureDim; ++k) {
      const double d = x[k] - mean[k];
      scale[k] += d * d;
    }
  });
  for (double& sc : scale) {
    sc = std::sqrt(sc / static_cast<double>(n_rows));
    if (!(sc > 1e-12)) sc = 1.0;
  }
  auto standardize = [&](const FeatureVector& x) {
    FeatureVector z;
    for (std::size_t k = 0; k < kFeatureDim; ++k) z[k] = (x[k] - mean[k]) / scale[k];
    return z;
  };

  std::vector<FeatureVector> eval_rows;
  std::vector<int> eval_labels;
  if (epoch_losses) {
    epoch_losses->clear();
    for (const TrainingSlide& s : slides) {
      for (const auto& v : s.tiles) {
        eval_rows.push_back(standardize(v[0]));
        eval_labels.push_back(s.label ? 1 : 0);
      }
    }
  }

  std::vector<double> w(kFeatureDim, 0.0);
  double b = 0.0;
  const std::uint64_t sample_stream = stream_id("sample");
  const std::uint64_t variant_stream = stream_id("variant");
  const std::uint64_t shuffle_stream = stream_id("shuffle");

  std::vector<FeatureVector> rows;
  std::vector<int> labels;
  std::vector<std::size_t> order;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rows.clear();
    labels.clear();
    const std::uint64_t epoch_seed = mix_seed(config.seed, sample_stream, static_cast<std::uint64_t>(epoch));
    Engine variant_engine = make_engine(config.seed, variant_stream, static_cast<std::uint64_t>(epoch));
    for (const TrainingSlide& s : slides) {
      if (s.tiles.empty()) continue;
      Engine engine = make_engine(epoch_seed, stream_id(s.slide_id));
      for (std::size_t i : sample_indices(s.tiles.size(), static_cast<std::size_t>(config.quota), engine)) {
        const auto& variants = s.tiles[i];
        std::size_t v = 0;
        if (config.use_variants && variants.size() > 1) {
          v = std::uniform_int_distribution<std::size_t>(0, variants.size() - 1)(variant_engine);
        }
        rows.push_back(standardize(variants[v]));
        labels.push_back(s.label ? 1 : 0);
      }
    }

    order.resize(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Engine shuffle_engine = make_engine(config.seed, shuffle_stream, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_engine);

    const std::size_t batch = static_cast<std::size_t>(config.batch_size);
    std::vector<FeatureVector> batch_rows;
    std::vector<int> batch_labels;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      batch_rows.clear();
      batch_labels.clear();
      for (std::size_t j = start; j < end; ++j) {
        batch_rows.push_back(rows[order[j]]);
        batch_labels.push_back(labels[order[j]]);
      }
      const LossGradient g = logistic_gradient(w, b, batch_rows, batch_labels);
      for (std::size_t k = 0; k < kFeatureDim; ++k) w[k] -= config.learning_rate * g.weights[k];
      b -= config.learning_rate * g.bias;
    }
    if (epoch_losses) epoch_losses->push_back(logistic_loss(w, b, eval_rows, eval_labels));
  }

  ScorerModel model;
  model.model_id = config.model_id;
  model.weights.assign(kFeatureDim, 0.0);
  model.bias = b;
  for (std::size_t k = 0; k < kFeatureDim; ++k) {
    model.weights[k] = w[k] / scale[k];
    model.bias -= w[k] * mean[k] / scale[k];
  }
  model.metadata.stain = config.stain;
  model.metadata.magnification = config.magnification;
  model.metadata.training_seed = config.seed;
  model.metadata.epochs = config.epochs;
  model.metadata.learning_rate = config.learning_rate;
  model.metadata.sampling_number = config.quota;
  model.metadata.reference_architecture = config.reference_architecture;
  model.metadata.reference_pooling = config.reference_pooling;
  return model;
}

// ---------------------------------------------------------------------------

std::string model_to_json(const ScorerModel& model) {
  const ModelMetadata& m = model.metadata;
  const nlohmann::json doc = {
      {"model_id", model.model_id},
      {"weights", model.weights},
      {"bias", model.bias},
      {"metadata",
       {{"stain", std::string(to_string(m.stain))},
        {"magnification", std::string(to_string(m.magnification))},
        {"training_seed", m.training_seed},
        {"epochs", m.epochs},
        {"learning_rate", m.learning_rate},
        {"sampling_number", m.sampling_number},
        {"reference_architecture", m.reference_architecture},
        {"reference_pooling", m.reference_pooling}}},
  };
  return doc.dump(2);
}

ScorerModel model_from_json(const std::string& text) {
  ScorerModel model;
  try {
    const nlohmann::json doc = nlohmann::json::parse(text);
    model.model_id = doc.at("model_id").get<std::string>();
    model.weights = doc.at("weights").get<std::vector<double>>();
    model.bias = doc.at("bias").get<double>();
    const auto& m = doc.at("metadata");
    model.metadata.stain = parse_stain(m.at("stain").get<std::string>());
    model.metadata.magnification = parse_mag_level(m.at("magnification").get<std::string>());
    model.metadata.training_seed = m.at("training_seed").get<std::uint64_t>();
    model.metadata.epochs = m.at("epochs").get<int>();
    model.metadata.learning_rate = m.at("learning_rate").get<double>();
    model.metadata.sampling_number = m.at("sampling_number").get<int>();
    model.metadata.reference_architecture = m.value("reference_architecture", std::string());
    model.metadata.reference_pooling = m.value("reference_pooling", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model file: ") + e.what());
  }
  model.validate();
  return model;
}

void save_model(const std::filesystem::path& path, const ScorerModel& model) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write model '" + path.string() + "'");
  out << model_to_json(model) << '\n';
}

ScorerModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return model_from_json(text);
}

// ---------------------------------------------------------------------------

void write_tile_scores(std::ostream& out, std::span<const TileScore> scores) {
  out << kTileScoreHeader << '\n';
  for (const TileScore& s : scores) {
    out << s.tile.slide_id << ',' << to_string(s.tile.stain) << ','
        << to_string(s.tile.magnification) << ',' << s.tile.grid_x << ',' << s.tile.grid_y
        << ',' << csv::format_double(s.score) << ',' << s.model_id << '\n';
  }
}

void write_tile_scores(const std::filesystem::path& path, std::span<const TileScore> scores) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write tile scores '" + path.string() + "'");
  write_tile_scores(out, scores);
}

std::vector<TileScore> read_tile_scores(std::istream& in) {
  csv::expect_header(in, kTileScoreHeader, "tile-score CSV");
  std::vector<TileScore> scores;
  std::string line;
  std::size_t row = 0;
  while (csv::read_line(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string what = fmt::format("tile-score CSV row {}", row);
    const auto f = csv::split(line);
    if (f.size() != 7) throw ConfigError(fmt::format("{}: expected 7 fields, got {}", what, f.size()));
    TileScore s;
    s.tile.slide_id = f[0];
    try {
      s.tile.stain = parse_stain(f[1]);
      s.tile.magnification = parse_mag_level(f[2]);
    } catch (const ConfigError& e) {
      throw ConfigError(what + ": " + e.what());
    }
    s.tile.grid_x = static_cast<int>(csv::parse_int(f[3], what));
    s.tile.grid_y = static_cast<int>(csv::parse_int(f[4], what));
    s.tile.origin_x = s.tile.grid_x * kTileEdgePx;
    s.tile.origin_y = s.tile.grid_y * kTileEdgePx;
    s.score = csv::parse_double(f[5], what);
    if (s.score < 0.0 || s.score > 1.0) {
      throw ConfigError(fmt::format("{}: score {} outside [0, 1]", what, f[5]));
    }
    s.model_id = f[6];
    if (s.tile.slide_id.empty() || s.model_id.empty()) {
      throw ConfigError(what + ": empty slide_id or model_id");
    }
    scores.push_back(std::move(s));
  }
  return scores;
}

std::vector<TileScore> import_external_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open tile scores '" + path.string() + "'");
  return read_tile_scores(in);
}

}  // namespace stainfuse
