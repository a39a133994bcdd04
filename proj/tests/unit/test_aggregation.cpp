#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>
#include <sstream>

#include "doctest.h"
#include "stainfuse/aggregation.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/random.hpp"

using namespace stainfuse;

namespace {

std::vector<TileScore> tiles_for(const std::string& slide, const std::string& model,
                                 const std::vector<double>& scores) {
  std::vector<TileScore> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    TileScore t;
    t.tile.slide_id = slide;
    t.tile.stain = Stain::MelanA;
    t.tile.magnification = MagLevel::X20;
    t.tile.grid_x = static_cast<int>(i);
    t.score = scores[i];
    t.model_id = model;
    out.push_back(t);
  }
  return out;
}

std::vector<double> uniform_scores(std::uint64_t seed, int n) {
  Engine engine = make_engine(seed);
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(uniform01(engine));
  return v;
}

}  // namespace

TEST_CASE("quantile_linear interpolates between order statistics") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(quantile_linear(v, 0.0) == 1.0);
  CHECK(quantile_linear(v, 1.0) == 4.0);
  CHECK(quantile_linear(v, 0.25) == doctest::Approx(1.75));
  CHECK(quantile_linear(v, 0.5) == doctest::Approx(2.5));
  const std::vector<double> one{7.0};
  CHECK(quantile_linear(one, 0.3) == 7.0);
  CHECK_THROWS_AS(quantile_linear(std::vector<double>{}, 0.5), Error);
}

TEST_CASE("slide score is the tile mean") {
  const auto tiles = tiles_for("s", "m", {0.1, 0.2, 0.9});
  const SlidePrediction p = aggregate_slide(tiles);
  CHECK(p.score == doctest::Approx(0.4));
  CHECK(p.n_tiles == 3);
  CHECK(p.slide_id == "s");
  CHECK(p.stain == Stain::MelanA);
  CHECK_THROWS_WITH_AS(aggregate_slide(std::vector<TileScore>{}), doctest::Contains("no tiles"), Error);
}

TEST_CASE("bootstrap CI is seed-deterministic and worker-independent") {
  const auto scores = uniform_scores(1, 100);
  BootstrapConfig cfg{2000, 0.05, 1234};
  const ConfidenceInterval a = slide_score_ci(scores, cfg, 1);
  for (unsigned w : {2u, 4u, 16u}) {
    const ConfidenceInterval b = slide_score_ci(scores, cfg, w);
    CHECK(a == b);
  }
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / 100.0;
  CHECK(a.low < mean);
  CHECK(a.high > mean);
  CHECK(a.n_boot == 2000);
  CHECK(a.seed == 1234);

  cfg.seed = 1235;
  CHECK_FALSE(slide_score_ci(scores, cfg) == a);
}

TEST_CASE("bootstrap CI width agrees with the normal approximation") {
  const auto scores = uniform_scores(2, 400);
  const ConfidenceInterval ci = slide_score_ci(scores, {10000, 0.05, 5});
  // sd of a U(0,1) mean over 400 draws: sqrt(1/12/400)
  const double expected = 2 * 1.959964 * std::sqrt(1.0 / 12.0 / 400.0);
  CHECK((ci.high - ci.low) == doctest::Approx(expected).epsilon(0.08));
}

TEST_CASE("CI endpoints converge across seeds at n_boot 10000") {
  const auto scores = uniform_scores(3, 100);
  const ConfidenceInterval a = slide_score_ci(scores, {10000, 0.05, 1});
  const ConfidenceInterval b = slide_score_ci(scores, {10000, 0.05, 2});
  CHECK(std::abs((a.high - a.low) - (b.high - b.low)) < 0.02);
}

TEST_CASE("single-tile slides get a degenerate CI") {
  const std::vector<double> one{0.42};
  const ConfidenceInterval ci = slide_score_ci(one, {100, 0.05, 1});
  CHECK(ci.low == 0.42);
  CHECK(ci.high == 0.42);
}

TEST_CASE("bootstrap config validation") {
  CHECK_THROWS_AS((BootstrapConfig{0, 0.05, 1}.validate()), ConfigError);
  CHECK_THROWS_AS((BootstrapConfig{100, 0.0, 1}.validate()), ConfigError);
  CHECK_THROWS_AS((BootstrapConfig{100, 1.0, 1}.validate()), ConfigError);
}

TEST_CASE("aggregate_tile_scores groups by model and slide") {
  std::vector<TileScore> all;
  for (const auto& [slide, model, v] : std::vector<std::tuple<std::string, std::string, std::vector<double>>>{
           {"b", "m2", {0.5, 0.7}}, {"a", "m2", {0.1}}, {"a", "m1", {0.2, 0.4}}}) {
    const auto t = tiles_for(slide, model, v);
    all.insert(all.end(), t.begin(), t.end());
  }
  // Shuffle order must not matter.
  std::reverse(all.begin(), all.end());
  const auto preds = aggregate_tile_scores(all, BootstrapConfig{200, 0.05, 9}, 2);
  REQUIRE(preds.size() == 3);
  CHECK(preds[0].model_id == "m1");
  CHECK(preds[0].slide_id == "a");
  CHECK(preds[0].score == doctest::Approx(0.3));
  CHECK(preds[1].model_id == "m2");
  CHECK(preds[1].slide_id == "a");
  CHECK(preds[2].slide_id == "b");
  CHECK(preds[2].score == doctest::Approx(0.6));
  for (const auto& p : preds) {
    REQUIRE(p.ci.has_value());
    CHECK(p.ci->low <= p.score);
    CHECK(p.ci->high >= p.score);
  }
  std::reverse(all.begin(), all.end());
  CHECK(aggregate_tile_scores(all, BootstrapConfig{200, 0.05, 9}, 1) == preds);
  CHECK_FALSE(aggregate_tile_scores(all, std::nullopt)[0].ci.has_value());
}

TEST_CASE("slide prediction CSV round trip") {
  std::vector<SlidePrediction> preds;
  SlidePrediction p;
  p.slide_id = "A_0001";
  p.stain = Stain::HE;
  p.model_id = "HE_X40";
  p.score = 0.123456789012345;
  p.n_tiles = 12;
  p.ci = ConfidenceInterval{0.1, 0.2, 0, 0};
  p.label = BinaryLabel::Melanoma;
  preds.push_back(p);
  p.slide_id = "A_0002";
  p.ci.reset();
  p.label.reset();
  preds.push_back(p);

  std::stringstream ss;
  write_slide_predictions(ss, preds);
  const auto back = read_slide_predictions(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].score == preds[0].score);
  CHECK(back[0].ci->low == 0.1);
  CHECK(back[0].label == BinaryLabel::Melanoma);
  CHECK_FALSE(back[1].ci.has_value());
  CHECK_FALSE(back[1].label.has_value());
}
