#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/fusion.hpp"
#include "stainfuse/random.hpp"

using namespace stainfuse;

namespace {

SlidePrediction pred(const std::string& model, double score, Stain stain = Stain::MelanA) {
  SlidePrediction p;
  p.slide_id = "s1";
  p.stain = stain;
  p.model_id = model;
  p.score = score;
  p.n_tiles = 10;
  return p;
}

FusionConfig config_for(FusionMode mode, std::vector<ModelCalibration> models) {
  FusionConfig c;
  c.mode = mode;
  c.models = std::move(models);
  c.normalize();
  return c;
}

}  // namespace

TEST_CASE("calibrate_score maps the threshold to one half") {
  CHECK(calibrate_score(0.3, 0.3) == doctest::Approx(0.5));
  CHECK(calibrate_score(0.0, 0.3) == 0.0);
  CHECK(calibrate_score(1.0, 0.3) == doctest::Approx(1.0));
  CHECK(calibrate_score(0.15, 0.3) == doctest::Approx(0.25));
  CHECK(calibrate_score(0.65, 0.3) == doctest::Approx(0.75));
  CHECK(calibrate_score(0.7, 0.5) == 0.7);
  // Degenerate thresholds are clamped, not divided by.
  CHECK(std::isfinite(calibrate_score(0.0, 0.0)));
  CHECK(std::isfinite(calibrate_score(1.0, 1.0)));
}

TEST_CASE("distance weighting worked example") {
  const auto cfg = config_for(FusionMode::ThresholdDistanceWeighted, {{"a", 0.5, 0.8}, {"b", 0.5, 0.8}});
  const SlidePrediction p[] = {pred("a", 0.8), pred("b", 0.4)};
  const FusedPrediction f = fuse(p, cfg);
  CHECK(f.score == doctest::Approx(0.7).epsilon(1e-14));
  CHECK_FALSE(f.fallback);
  REQUIRE(f.contributions.size() == 2);
  CHECK(f.contributions[0].second == doctest::Approx(0.75));
  CHECK(f.contributions[1].second == doctest::Approx(0.25));
}

TEST_CASE("unanimous models return the common score in every mode") {
  for (FusionMode mode : kAllFusionModes) {
    const auto cfg = config_for(mode, {{"a", 0.5, 0.9}, {"b", 0.5, 0.7}, {"c", 0.5, 0.6}});
    const SlidePrediction p[] = {pred("a", 0.83), pred("b", 0.83), pred("c", 0.83)};
    CHECK(fuse(p, cfg).score == doctest::Approx(0.83).epsilon(1e-14));
  }
}

TEST_CASE("all-at-threshold falls back to unweighted") {
  const auto cfg = config_for(FusionMode::ThresholdDistanceWeighted, {{"a", 0.3, 0.8}, {"b", 0.6, 0.8}});
  const SlidePrediction p[] = {pred("a", 0.3), pred("b", 0.6)};
  const FusedPrediction f = fuse(p, cfg);
  CHECK(f.fallback);
  CHECK(f.score == doctest::Approx(0.5));
  CHECK(f.contributions[0].second == doctest::Approx(0.5));

  const auto vw = config_for(FusionMode::ValidationWeighted, {{"a", 0.5, 0.5}, {"b", 0.5, 0.4}});
  const SlidePrediction q[] = {pred("a", 0.2), pred("b", 0.6)};
  const FusedPrediction g = fuse(q, vw);
  CHECK(g.fallback);
  CHECK(g.score == doctest::Approx(0.4));
}

TEST_CASE("validation weighting uses AUROC above chance") {
  const auto cfg = config_for(FusionMode::ValidationWeighted, {{"a", 0.5, 0.9}, {"b", 0.5, 0.6}});
  const SlidePrediction p[] = {pred("a", 1.0), pred("b", 0.0)};
  // weights 0.4 and 0.1
  CHECK(fuse(p, cfg).score == doctest::Approx(0.8));
}

TEST_CASE("fusion properties on random inputs") {
  Engine engine = make_engine(77);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + static_cast<int>(uniform01(engine) * 5);
    std::vector<ModelCalibration> cals;
    std::vector<SlidePrediction> preds;
    for (int i = 0; i < k; ++i) {
      const std::string id = "m" + std::to_string(i);
      cals.push_back({id, 0.05 + 0.9 * uniform01(engine), uniform01(engine)});
      preds.push_back(pred(id, uniform01(engine)));
    }
    for (FusionMode mode : kAllFusionModes) {
      const auto cfg = config_for(mode, cals);
      const FusedPrediction f = fuse(preds, cfg);

      // Stays within the calibrated scores.
      double lo = 1.0, hi = 0.0;
      for (const auto& p : preds) {
        const double c = calibrate_score(p.score, cfg.find(p.model_id).threshold);
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
      CHECK(f.score >= lo);
      CHECK(f.score <= hi);

      // Unanimous decisions are preserved.
      if (lo > 0.5) CHECK(f.score > 0.5);
      if (hi < 0.5) CHECK(f.score < 0.5);

      double wsum = 0.0;
      for (const auto& [id, w] : f.contributions) {
        CHECK(w >= 0.0);
        wsum += w;
      }
      CHECK(wsum == doctest::Approx(1.0));

      // Input order does not matter, bit for bit.
      auto shuffled = preds;
      std::shuffle(shuffled.begin(), shuffled.end(), engine);
      CHECK(fuse(shuffled, cfg) == f);
    }
  }
}

TEST_CASE("fusion input errors") {
  const auto cfg = config_for(FusionMode::Unweighted, {{"a", 0.5, 0.8}});
  CHECK_THROWS_AS(fuse(std::vector<SlidePrediction>{}, cfg), Error);
  const SlidePrediction unknown[] = {pred("zz", 0.5)};
  CHECK_THROWS_WITH(fuse(unknown, cfg), doctest::Contains("unknown model_id"));
  const SlidePrediction twice[] = {pred("a", 0.5), pred("a", 0.6)};
  CHECK_THROWS_WITH(fuse(twice, cfg), doctest::Contains("given twice"));

  FusionConfig dup;
  dup.models = {{"a", 0.5, 0.5}, {"a", 0.4, 0.5}};
  CHECK_THROWS_AS(dup.normalize(), ConfigError);
  FusionConfig bad;
  bad.models = {{"a", 0.5, 1.5}};
  CHECK_THROWS_AS(bad.normalize(), ConfigError);
  FusionConfig clamp;
  clamp.models = {{"a", 0.0, 0.5}, {"b", 1.0, 0.5}};
  clamp.normalize();
  CHECK(clamp.models[0].threshold == kMinThreshold);
  CHECK(clamp.models[1].threshold == kMaxThreshold);
}

TEST_CASE("fusion config JSON round trip") {
  const auto cfg = config_for(FusionMode::ValidationWeighted, {{"HE_X40", 0.123456789, 0.91}, {"MelanA_X5", 0.7, 0.66}});
  const FusionConfig back = fusion_config_from_json(fusion_config_to_json(cfg));
  CHECK(back.mode == cfg.mode);
  CHECK(back.layout == FusionLayout::Flat);
  REQUIRE(back.models.size() == 2);
  CHECK(back.models[0].threshold == 0.123456789);
  CHECK(back.models[1].validation_auroc == 0.66);

  testing::TempDir dir("fusion");
  write_fusion_config(dir.path() / "f.json", cfg);
  CHECK(read_fusion_config(dir.path() / "f.json").models.size() == 2);
  CHECK_THROWS_AS(fusion_config_from_json("{\"mode\": \"Max\", \"models\": []}"), ConfigError);
  CHECK_THROWS_AS(fusion_config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS(read_fusion_config(dir.path() / "missing.json"), ConfigError);
}

TEST_CASE("two-level layout fuses MelanA first") {
  auto cfg = config_for(FusionMode::Unweighted, {{"HE", 0.5, 0.9}, {"m1", 0.5, 0.8}, {"m2", 0.5, 0.6}});
  const SlidePrediction he = pred("HE", 0.9, Stain::HE);
  const SlidePrediction mel[] = {pred("m1", 0.2), pred("m2", 0.4)};
  CHECK(fuse_multimodal(he, mel, cfg).score == doctest::Approx((0.9 + 0.2 + 0.4) / 3));
  cfg.layout = FusionLayout::TwoLevel;
  CHECK(fuse_multimodal(he, mel, cfg).score == doctest::Approx((0.9 + 0.3) / 2));
  CHECK(fuse_multimodal(he, {}, cfg).score == doctest::Approx(0.9));
}

TEST_CASE("hierarchical gate") {
  const auto cfg = config_for(FusionMode::ThresholdDistanceWeighted, {{"HE", 0.4, 0.9}, {"m1", 0.5, 0.8}});
  SlidePrediction he = pred("HE", 0.7, Stain::HE);
  const SlidePrediction mel[] = {pred("m1", 0.1)};

  he.ci = ConfidenceInterval{0.6, 0.8, 100, 1};
  const FusedPrediction certain = hierarchical_predict(he, 0.4, mel, cfg);
  CHECK(certain.score == calibrate_score(0.7, 0.4));
  REQUIRE(certain.contributions.size() == 1);
  CHECK(certain.contributions[0].first == "HE");

  he.ci = ConfidenceInterval{0.3, 0.8, 100, 1};
  const FusedPrediction uncertain = hierarchical_predict(he, 0.4, mel, cfg);
  CHECK(uncertain.contributions.size() == 2);
  CHECK(uncertain.score == fuse_multimodal(he, mel, cfg).score);

  // Bounds are inclusive.
  he.ci = ConfidenceInterval{0.4, 0.8, 100, 1};
  CHECK(hierarchical_predict(he, 0.4, mel, cfg).contributions.size() == 2);
  he.ci = ConfidenceInterval{0.1, 0.4, 100, 1};
  CHECK(hierarchical_predict(he, 0.4, mel, cfg).contributions.size() == 2);

  he.ci.reset();
  CHECK_THROWS_WITH(hierarchical_predict(he, 0.4, mel, cfg), doctest::Contains("no H&E confidence"));
}

TEST_CASE("fused prediction ids") {
  FusedPrediction f;
  f.slide_id = "s";
  f.mode = FusionMode::Unweighted;
  f.score = 0.3;
  CHECK(to_slide_prediction(f, Stain::MelanA).model_id == "fused:Unweighted");
  CHECK(to_slide_prediction(f, Stain::MelanA, "x").model_id == "x");
  CHECK(parse_fusion_mode("ThresholdDistanceWeighted") == FusionMode::ThresholdDistanceWeighted);
  CHECK_THROWS_AS(parse_fusion_layout("tree"), ConfigError);
}
