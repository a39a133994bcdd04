#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stainfuse/tessellation.hpp"

namespace stainfuse {

/// Color transform a site's staining and scanning applies to every pixel.
struct StainTransform {
  double hue_shift_deg = 0.0;
  double saturation_scale = 1.0;
  double brightness_scale = 1.0;

  bool is_identity() const noexcept {
    return hue_shift_deg == 0.0 && saturation_scale == 1.0 && brightness_scale == 1.0;
  }
};

struct SiteProfile {
  std::string site_id;
  StainTransform he;
  StainTransform melana;
  /// Multiplies the opacity of the red MelanA chromogen (antibody dilution).
  double chromogen_intensity = 1.0;
  /// Log-scale std-dev of the per-slide staining strength (lab-to-lab and
  /// batch-to-batch variation).
  double stain_variability = 0.05;

  void validate() const;
};

struct SynthSite {
  SiteProfile profile;
  int n_slides_per_class = 20;
};

struct LesionGeometry {
  /// Main blob radius as a fraction of the image edge.
  double main_radius = 0.45;
  double harmonic_amplitude = 0.06;
  int min_satellites = 2;
  int max_satellites = 5;
  double satellite_radius_min = 0.05;
  double satellite_radius_max = 0.10;
  /// Extra satellite radius spread for melanoma, scaled by effect_size.
  double melanoma_radius_spread = 0.05;
  int vertices_per_blob = 48;
};

struct SynthConfig {
  std::vector<SynthSite> sites;
  int image_size = 1920;
  double base_um_per_px = kBaseUmPerPx;
  /// Class separability in [0, 1]; 0 makes labels carry no signal.
  double effect_size = 0.8;
  /// Std-dev of the slide-level deviation of lesion appearance from its class.
  double slide_noise = 0.5;
  /// Per-slide preparation artifacts (fixation, section thickness) shifting
  /// apparent lesion appearance; std-dev is this times the site's
  /// stain_variability, so sites with unstable staining are noisier. H&E
  /// morphology is more sensitive to preparation than the MelanA chromogen.
  double preparation_noise_he = 4.0;
  double preparation_noise_melana = 3.0;
  /// Independent per-stain slide deviations (true) or one shared deviation.
  bool complementary_signal = true;
  /// Fraction of melanoma slides labelled in situ.
  double in_situ_fraction = 0.15;
  /// Fraction of the first site's slides (per class) assigned to training.
  double train_fraction = 0.6;
  LesionGeometry lesion;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Three sites mirroring a single-center training cohort plus two external
/// cohorts with shifted staining.
SynthConfig default_synth_config();

enum class SlideLabel { Melanoma, InSitu, Nevus };
std::string_view to_string(SlideLabel label) noexcept;
SlideLabel parse_slide_label(std::string_view text);
inline bool is_malignant(SlideLabel label) noexcept { return label != SlideLabel::Nevus; }

struct GeneratedSlide {
  SlideImage image;
  AnnotationMask mask;
};

/// Renders one stain of one slide. Lesion geometry and the slide's latent
/// appearance derive from `slide_seed`, so both stains of a slide share the
/// same lesion outline.
GeneratedSlide generate_slide(SlideLabel label, const SiteProfile& site, Stain stain,
                              const SynthConfig& config, std::uint64_t slide_seed,
                              const std::string& slide_id = "slide");

struct ManifestEntry {
  std::string slide_id;
  std::string site;
  SlideLabel label = SlideLabel::Nevus;
  std::string split;  // "train" / "holdout" on the training site, "test" elsewhere
  std::string he_path;
  std::string melana_path;
  std::string annotation_path;
};

struct CohortManifest {
  std::string cohort_id;
  std::vector<ManifestEntry> entries;
  /// Directory manifest paths are relative to (not serialized).
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& relative) const { return base_dir / relative; }
};

void write_manifest(const std::filesystem::path& path, const CohortManifest& manifest);
CohortManifest read_manifest(const std::filesystem::path& path);

inline std::string manifest_file_name(const std::string& cohort_id) {
  return "manifest_" + cohort_id + ".json";
}

/// Generates every slide of every site under out_dir (images/, annotations/)
/// and writes one manifest per site. The first site is split into train and
/// holdout by slide.
std::vector<CohortManifest> generate_cohorts(const SynthConfig& config,
                                             const std::filesystem::path& out_dir,
                                             unsigned workers = 1);

}  // namespace stainfuse
