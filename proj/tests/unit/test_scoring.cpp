#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/random.hpp"
#include "stainfuse/scoring.hpp"

using namespace stainfuse;

namespace {

std::string slide_name(int label, int s) { return (label ? "m_" : "n_") + std::to_string(s); }

std::vector<TileRef> make_tiles(const std::string& slide, int n) {
  std::vector<TileRef> tiles;
  for (int i = 0; i < n; ++i) {
    TileRef t;
    t.slide_id = slide;
    t.grid_x = i;
    t.origin_x = i * kTileEdgePx;
    tiles.push_back(t);
  }
  return tiles;
}

FeatureVector random_features(Engine& engine) {
  FeatureVector x;
  for (double& v : x) v = uniform(engine, -2.0, 2.0);
  return x;
}

// Two classes separated along the first feature.
std::vector<TrainingSlide> separable_slides(std::uint64_t seed, int n_per_class, int tiles) {
  Engine engine = make_engine(seed);
  std::vector<TrainingSlide> slides;
  for (int label = 0; label < 2; ++label) {
    for (int s = 0; s < n_per_class; ++s) {
      TrainingSlide slide{slide_name(label, s), label, {}};
      for (int t = 0; t < tiles; ++t) {
        FeatureVector x = random_features(engine);
        x[0] = (label ? 1.0 : -1.0) + 0.5 * uniform(engine, -1.0, 1.0);
        x[24] = 100.0 + 40.0 * x[0];  // same signal on a large scale
        slide.tiles.push_back({x});
      }
      slides.push_back(std::move(slide));
    }
  }
  return slides;
}

}  // namespace

TEST_CASE("sample_indices: without replacement when enough tiles, with otherwise") {
  Engine engine = make_engine(1);
  const auto a = sample_indices(20, 10, engine);
  CHECK(a.size() == 10);
  CHECK(std::set(a.begin(), a.end()).size() == 10);

  const auto b = sample_indices(3, 10, engine);
  CHECK(b.size() == 10);
  for (auto i : b) CHECK(i < 3);

  // Every tile shows up with positive frequency across seeds.
  std::map<std::size_t, int> counts;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Engine e = make_engine(s);
    for (auto i : sample_indices(3, 10, e)) ++counts[i];
  }
  CHECK(counts.size() == 3);
  for (const auto& [i, c] : counts) CHECK(c > 500);
}

TEST_CASE("sample_tiles_per_slide: exact quota, order independent, warns on empty slides") {
  std::vector<SlideTiles> slides{{"a", make_tiles("a", 50)}, {"b", make_tiles("b", 3)}, {"c", {}}};
  const TileSample s = sample_tiles_per_slide(slides, 10, 42);
  CHECK(s.tiles.size() == 20);
  REQUIRE(s.warnings.size() == 1);
  CHECK(s.warnings[0].slide_id == "c");

  std::vector<SlideTiles> reversed(slides.rbegin(), slides.rend());
  const TileSample r = sample_tiles_per_slide(reversed, 10, 42);
  auto only = [](const std::vector<TileRef>& v, const std::string& id) {
    std::vector<TileRef> out;
    std::copy_if(v.begin(), v.end(), std::back_inserter(out), [&](const TileRef& t) { return t.slide_id == id; });
    return out;
  };
  CHECK(only(s.tiles, "a") == only(r.tiles, "a"));
  CHECK(only(s.tiles, "b") == only(r.tiles, "b"));
  CHECK_THROWS_AS(sample_tiles_per_slide(slides, 0, 1), ConfigError);
}

TEST_CASE("sigmoid") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
  CHECK(std::isfinite(sigmoid(-800.0)));
}

TEST_CASE("loss gradient matches central finite differences") {
  Engine engine = make_engine(2024);
  for (int instance = 0; instance < 50; ++instance) {
    const int n = 1 + static_cast<int>(engine() % 20);
    std::vector<FeatureVector> rows;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      rows.push_back(random_features(engine));
      labels.push_back(static_cast<int>(engine() % 2));
    }
    std::vector<double> w(kFeatureDim);
    for (double& v : w) v = uniform(engine, -1.0, 1.0);
    const double b = uniform(engine, -1.0, 1.0);
    const LossGradient g = logistic_gradient(w, b, rows, labels);

    const double h = 1e-6;
    for (std::size_t k = 0; k <= kFeatureDim; ++k) {
      std::vector<double> wp = w, wm = w;
      double bp = b, bm = b;
      if (k < kFeatureDim) {
        wp[k] += h;
        wm[k] -= h;
      } else {
        bp += h;
        bm -= h;
      }
      const double numeric = (logistic_loss(wp, bp, rows, labels) - logistic_loss(wm, bm, rows, labels)) / (2 * h);
      const double analytic = k < kFeatureDim ? g.weights[k] : g.bias;
      REQUIRE(std::abs(numeric - analytic) <= 1e-5 * std::max(1.0, std::abs(analytic)));
    }
  }
}

TEST_CASE("training separates separable data and is deterministic") {
  const auto slides = separable_slides(7, 6, 20);
  TrainConfig cfg;
  cfg.model_id = "toy";
  cfg.epochs = 15;
  cfg.learning_rate = 0.1;
  cfg.quota = 16;
  cfg.seed = 99;
  std::vector<double> losses;
  const ScorerModel m = train_baseline_scorer(slides, cfg, &losses);
  REQUIRE(losses.size() == 15);
  CHECK(losses.back() < losses.front());
  CHECK(losses.back() < 0.3);

  int correct = 0, total = 0;
  for (const auto& s : slides) {
    for (const auto& t : s.tiles) {
      correct += (score_tile(m, t[0]) >= 0.5) == (s.label == 1);
      ++total;
    }
  }
  CHECK(correct >= total * 95 / 100);

  const ScorerModel again = train_baseline_scorer(slides, cfg);
  CHECK(again.weights == m.weights);
  CHECK(again.bias == m.bias);
  CHECK(m.metadata.training_seed == 99);
  CHECK(m.metadata.sampling_number == 16);

  cfg.seed = 100;
  CHECK(train_baseline_scorer(slides, cfg).weights != m.weights);
}

TEST_CASE("training rejects single-class input") {
  auto slides = separable_slides(1, 3, 5);
  slides.erase(std::remove_if(slides.begin(), slides.end(), [](const TrainingSlide& s) { return s.label == 1; }),
               slides.end());
  CHECK_THROWS_WITH_AS(train_baseline_scorer(slides, TrainConfig{}), doctest::Contains("degenerate"), Error);
}

TEST_CASE("zero epochs leave the zero-initialized model") {
  TrainConfig cfg;
  cfg.epochs = 0;
  const ScorerModel m = train_baseline_scorer(separable_slides(3, 2, 4), cfg);
  for (double w : m.weights) CHECK(w == 0.0);
  CHECK(m.bias == 0.0);
  Engine engine = make_engine(4);
  CHECK(score_tile(m, random_features(engine)) == 0.5);
}

TEST_CASE("model JSON round trip is exact") {
  testing::TempDir dir("model");
  TrainConfig cfg;
  cfg.model_id = "MelanA_X10";
  cfg.stain = Stain::MelanA;
  cfg.magnification = MagLevel::X10;
  cfg.epochs = 3;
  cfg.learning_rate = 2.5e-4;
  cfg.reference_architecture = "ResNet34";
  cfg.reference_pooling = "catavgmax";
  const ScorerModel m = train_baseline_scorer(separable_slides(5, 3, 6), cfg);
  save_model(dir.path() / "m.json", m);
  const ScorerModel back = load_model(dir.path() / "m.json");
  CHECK(back.model_id == m.model_id);
  CHECK(back.weights == m.weights);
  CHECK(back.bias == m.bias);
  CHECK(back.metadata.stain == Stain::MelanA);
  CHECK(back.metadata.magnification == MagLevel::X10);
  CHECK(back.metadata.learning_rate == 2.5e-4);
  CHECK(back.metadata.reference_architecture == "ResNet34");
  CHECK_THROWS_AS(load_model(dir.path() / "missing.json"), ConfigError);
  CHECK_THROWS_AS(model_from_json("{\"model_id\": \"x\", \"weights\": [1, 2]}"), ConfigError);
}

TEST_CASE("tile score CSV round trip and row-numbered errors") {
  std::vector<TileScore> scores;
  Engine engine = make_engine(8);
  for (int i = 0; i < 30; ++i) {
    TileScore s;
    s.tile.slide_id = "s" + std::to_string(i % 4);
    s.tile.stain = i % 2 ? Stain::MelanA : Stain::HE;
    s.tile.magnification = kAllMagLevels[static_cast<std::size_t>(i % 4)];
    s.tile.grid_x = i;
    s.tile.grid_y = i / 3;
    s.tile.origin_x = s.tile.grid_x * kTileEdgePx;
    s.tile.origin_y = s.tile.grid_y * kTileEdgePx;
    s.score = uniform01(engine);
    s.model_id = "m";
    scores.push_back(s);
  }
  std::stringstream ss;
  write_tile_scores(ss, scores);
  CHECK(read_tile_scores(ss) == scores);

  std::istringstream bad(std::string(kTileScoreHeader) + "\ns1,HE,X40,0,0,0.5,m\ns1,HE,X40,1,0,1.5,m\n");
  CHECK_THROWS_WITH_AS(read_tile_scores(bad), doctest::Contains("row 2"), ConfigError);
  std::istringstream short_row(std::string(kTileScoreHeader) + "\ns1,HE,X40,0,0.5,m\n");
  CHECK_THROWS_WITH_AS(read_tile_scores(short_row), doctest::Contains("row 1"), ConfigError);
  std::istringstream bad_header("slide,score\n");
  CHECK_THROWS_AS(read_tile_scores(bad_header), ConfigError);
}
