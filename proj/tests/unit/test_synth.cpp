#include "doctest.h"
#include "helpers.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/synth.hpp"

using namespace stainfuse;

namespace {

SynthConfig small_config() {
  SynthConfig cfg = default_synth_config();
  cfg.image_size = 480;
  return cfg;
}

// Pixels dominated by the red chromogen.
bool is_red(const std::uint8_t* p) { return p[0] > 120 && p[0] > p[1] + 60 && p[0] > p[2] + 40; }

struct RedCount {
  long inside = 0;
  long outside = 0;
};

RedCount count_red(const GeneratedSlide& s) {
  const int w = s.image.width();
  const auto mask = rasterize_mask(s.mask, w, s.image.height(), 1.0);
  RedCount c;
  for (int y = 0; y < s.image.height(); ++y) {
    for (int x = 0; x < w; ++x) {
      if (!is_red(s.image.pixels.at(x, y))) continue;
      (mask[static_cast<std::size_t>(y) * w + x] ? c.inside : c.outside)++;
    }
  }
  return c;
}

}  // namespace

TEST_CASE("default synth config describes three sites") {
  const SynthConfig cfg = default_synth_config();
  REQUIRE(cfg.sites.size() == 3);
  CHECK(cfg.sites[0].profile.he.is_identity());
  CHECK_FALSE(cfg.sites[1].profile.he.is_identity());
  CHECK(cfg.effect_size == 0.8);
  CHECK(cfg.complementary_signal);
  CHECK_NOTHROW(cfg.validate());

  SynthConfig bad = cfg;
  bad.effect_size = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.preparation_noise_he = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("slide generation is deterministic") {
  const SynthConfig cfg = small_config();
  const SiteProfile& site = cfg.sites[1].profile;
  const auto a = generate_slide(SlideLabel::Melanoma, site, Stain::MelanA, cfg, 99, "x");
  const auto b = generate_slide(SlideLabel::Melanoma, site, Stain::MelanA, cfg, 99, "x");
  CHECK(a.image.pixels == b.image.pixels);
  CHECK(a.mask.polygons == b.mask.polygons);
  CHECK(a.image.width() == 480);
  CHECK(a.image.stain == Stain::MelanA);
  const auto c = generate_slide(SlideLabel::Melanoma, site, Stain::MelanA, cfg, 100, "x");
  CHECK_FALSE(a.image.pixels == c.image.pixels);
}

TEST_CASE("both stains of a slide share the lesion outline") {
  const SynthConfig cfg = small_config();
  const SiteProfile& site = cfg.sites[0].profile;
  const auto he = generate_slide(SlideLabel::Nevus, site, Stain::HE, cfg, 5);
  const auto mel = generate_slide(SlideLabel::Nevus, site, Stain::MelanA, cfg, 5);
  CHECK(he.mask.polygons == mel.mask.polygons);
  CHECK_NOTHROW(he.mask.validate());
}

TEST_CASE("zero effect size makes labels carry no signal") {
  SynthConfig cfg = small_config();
  cfg.effect_size = 0.0;
  const SiteProfile& site = cfg.sites[2].profile;
  for (Stain stain : {Stain::HE, Stain::MelanA}) {
    const auto m = generate_slide(SlideLabel::Melanoma, site, stain, cfg, 17);
    const auto n = generate_slide(SlideLabel::Nevus, site, stain, cfg, 17);
    CHECK(m.image.pixels == n.image.pixels);
  }
}

TEST_CASE("chromogen stays inside the annotated lesion") {
  const SynthConfig cfg = small_config();
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto s = generate_slide(SlideLabel::Melanoma, cfg.sites[0].profile, Stain::MelanA, cfg, seed);
    const RedCount c = count_red(s);
    CHECK(c.inside > 0);
    CHECK(c.outside == 0);
  }
}

TEST_CASE("melanoma shows more chromogen than nevus on average") {
  SynthConfig cfg = small_config();
  cfg.slide_noise = 0.0;
  cfg.preparation_noise_melana = 0.0;
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const auto m = generate_slide(SlideLabel::Melanoma, cfg.sites[0].profile, Stain::MelanA, cfg, seed);
    const auto n = generate_slide(SlideLabel::Nevus, cfg.sites[0].profile, Stain::MelanA, cfg, seed);
    CHECK(count_red(m).inside > count_red(n).inside);
  }
}

TEST_CASE("cohort generation writes manifests with a train/holdout split") {
  testing::TempDir dir("synth");
  SynthConfig cfg = small_config();
  cfg.image_size = 480;
  for (auto& s : cfg.sites) s.n_slides_per_class = 3;
  cfg.seed = 4;
  const auto manifests = generate_cohorts(cfg, dir.path(), 2);
  REQUIRE(manifests.size() == 3);
  int train = 0, holdout = 0;
  for (const auto& e : manifests[0].entries) {
    train += e.split == "train";
    holdout += e.split == "holdout";
    CHECK(std::filesystem::exists(manifests[0].resolve(e.he_path)));
    CHECK(std::filesystem::exists(manifests[0].resolve(e.melana_path)));
    CHECK(std::filesystem::exists(manifests[0].resolve(e.annotation_path)));
  }
  CHECK(train + holdout == 6);
  CHECK(train > 0);
  CHECK(holdout > 0);
  for (const auto& e : manifests[1].entries) CHECK(e.split == "test");

  const CohortManifest back =
      read_manifest(dir.path() / manifest_file_name(manifests[1].cohort_id));
  CHECK(back.cohort_id == manifests[1].cohort_id);
  REQUIRE(back.entries.size() == manifests[1].entries.size());
  CHECK(back.entries[0].label == manifests[1].entries[0].label);

  // Worker count does not change the data.
  testing::TempDir dir1("synth1");
  const auto again = generate_cohorts(cfg, dir1.path(), 1);
  const auto& e0 = manifests[2].entries[0];
  CHECK(again[2].entries[0].slide_id == e0.slide_id);
  CHECK(again[2].entries[0].label == e0.label);
}
