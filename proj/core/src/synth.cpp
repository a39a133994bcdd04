#include "stainfuse/synth.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/parallel.hpp"
#include "stainfuse/random.hpp"

namespace stainfuse {

void SiteProfile::validate() const {
  for (const StainTransform* t : {&he, &melana}) {
    if (!(t->saturation_scale > 0.0) || !(t->brightness_scale > 0.0)) {
      throw ConfigError(fmt::format("site '{}': color scales must be > 0", site_id));
    }
    if (!(t->hue_shift_deg >= -180.0 && t->hue_shift_deg <= 180.0)) {
      throw ConfigError(fmt::format("site '{}': hue shift must lie in [-180, 180]", site_id));
    }
  }
  if (!(chromogen_intensity > 0.0)) {
    throw ConfigError(fmt::format("site '{}': chromogen intensity must be > 0", site_id));
  }
  if (!(stain_variability >= 0.0)) {
    throw ConfigError(fmt::format("site '{}': stain variability must be >= 0", site_id));
  }
}

void SynthConfig::validate() const {
  if (image_size < 2 * kTileEdgePx) {
    throw ConfigError(fmt::format("synthetic image size must be >= {} px", 2 * kTileEdgePx));
  }
  if (base_um_per_px != kBaseUmPerPx) {
    throw ConfigError("synthetic slides are generated at 0.25 um/px");
  }
  if (!(effect_size >= 0.0 && effect_size <= 1.0)) throw ConfigError("effect_size must lie in [0, 1]");
  if (!(slide_noise >= 0.0)) throw ConfigError("slide_noise must be >= 0");
  if (!(preparation_noise_he >= 0.0) || !(preparation_noise_melana >= 0.0)) {
    throw ConfigError("preparation noise must be >= 0");
  }
  if (!(in_situ_fraction >= 0.0 && in_situ_fraction <= 1.0)) {
    throw ConfigError("in_situ_fraction must lie in [0, 1]");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  const LesionGeometry& g = lesion;
  if (!(g.main_radius > 0.0 && g.main_radius <= 0.5) || g.min_satellites < 0 ||
      g.max_satellites < g.min_satellites || !(g.satellite_radius_min > 0.0) ||
      g.satellite_radius_max < g.satellite_radius_min || g.vertices_per_blob < 3 ||
      !(g.harmonic_amplitude >= 0.0 && g.harmonic_amplitude < 0.5) ||
      !(g.melanoma_radius_spread >= 0.0)) {
    throw ConfigError("invalid lesion geometry");
  }
  std::vector<std::string> ids;
  for (const SynthSite& s : sites) {
    s.profile.validate();
    if (s.n_slides_per_class < 0) throw ConfigError("n_slides_per_class must be >= 0");
    if (std::find(ids.begin(), ids.end(), s.profile.site_id) != ids.end()) {
      throw ConfigError(fmt::format("duplicate site id '{}'", s.profile.site_id));
    }
    ids.push_back(s.profile.site_id);
  }
}

SynthConfig default_synth_config() {
  SynthConfig cfg;
  cfg.seed = 20240101;
  // Chromogen scales 1.0 / 0.6 / 1.4 stand in for differing antibody dilutions.
  SiteProfile a{"A", {}, {}, 1.0, 0.05};
  SiteProfile b{"B", {20.0, 0.80, 1.05}, {20.0, 0.85, 1.05}, 0.6, 0.35};
  SiteProfile c{"C", {-15.0, 1.25, 0.92}, {-15.0, 1.20, 0.92}, 1.4, 0.35};
  cfg.sites = {{a, 20}, {b, 20}, {c, 20}};
  return cfg;
}

std::string_view to_string(SlideLabel label) noexcept {
  switch (label) {
    case SlideLabel::Melanoma: return "melanoma";
    case SlideLabel::InSitu: return "in_situ";
    case SlideLabel::Nevus: return "nevus";
  }
  return "nevus";
}

SlideLabel parse_slide_label(std::string_view text) {
  if (text == "melanoma") return SlideLabel::Melanoma;
  if (text == "in_situ") return SlideLabel::InSitu;
  if (text == "nevus") return SlideLabel::Nevus;
  throw ConfigError(fmt::format("unknown slide label '{}'", text));
}

namespace {

struct Rgb {
  double r, g, b;
};

// Smooth noise in [-1, 1]: two octaves of bilinearly interpolated lattice values.
class ValueNoise {
 public:
  ValueNoise(int width, int height, int cell, Engine& engine)
      : cell_(cell), cols_(width / cell + 2), rows_(height / cell + 2),
        lattice_(static_cast<std::size_t>(cols_) * rows_) {
    for (double& v : lattice_) v = uniform(engine, -1.0, 1.0);
  }

  // Fills out[0..width) with row y.
  void row(int y, std::vector<double>& out) const {
    const double fy = static_cast<double>(y) / cell_;
    const int iy = static_cast<int>(fy);
    const double ty = smooth(fy - iy);
    const double* r0 = &lattice_[static_cast<std::size_t>(iy) * cols_];
    const double* r1 = r0 + cols_;
    for (std::size_t x = 0; x < out.size(); ++x) {
      const double fx = static_cast<double>(x) / cell_;
      const int ix = static_cast<int>(fx);
      const double tx = smooth(fx - ix);
      out[x] = (r0[ix] * (1 - tx) + r0[ix + 1] * tx) * (1 - ty) +
               (r1[ix] * (1 - tx) + r1[ix + 1] * tx) * ty;
    }
  }


 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

  int cell_, cols_, rows_;
  std::vector<double> lattice_;
};

// Star-shaped blob with low-order harmonic wobble.
Polygon make_blob(double cx, double cy, double radius, const LesionGeometry& g, Engine& engine,
                  double limit) {
  const double phase2 = uniform(engine, 0.0, 2.0 * std::numbers::pi);
  const double phase3 = uniform(engine, 0.0, 2.0 * std::numbers::pi);
  const double amp2 = g.harmonic_amplitude * uniform(engine, 0.3, 1.0);
  const double amp3 = g.harmonic_amplitude - amp2;
  Polygon poly;
  poly.reserve(static_cast<std::size_t>(g.vertices_per_blob));
  for (int k = 0; k < g.vertices_per_blob; ++k) {
    const double theta = 2.0 * std::numbers::pi * k / g.vertices_per_blob;
    const double r = radius * (1.0 + amp2 * std::sin(2.0 * theta + phase2) +
                               amp3 * std::sin(3.0 * theta + phase3));
    poly.push_back({std::clamp(cx + r * std::cos(theta), 0.0, limit),
                    std::clamp(cy + r * std::sin(theta), 0.0, limit)});
  }
  return poly;
}

AnnotationMask make_lesion(const SynthConfig& cfg, bool malignant, std::uint64_t slide_seed,
                           const std::string& slide_id) {
  const LesionGeometry& g = cfg.lesion;
  const double size = cfg.image_size;
  Engine engine = make_engine(slide_seed, stream_id("geometry"));
  AnnotationMask mask;
  mask.slide_id = slide_id;

  const double cx = size * (0.5 + uniform(engine, -0.02, 0.02));
  const double cy = size * (0.5 + uniform(engine, -0.02, 0.02));
  const double main_r = size * g.main_radius * (1.0 - g.harmonic_amplitude) * 0.98;
  mask.polygons.push_back(make_blob(cx, cy, main_r, g, engine, size));

  const int n_sat = std::uniform_int_distribution<int>(g.min_satellites, g.max_satellites)(engine);
  const double spread = malignant ? cfg.effect_size * g.melanoma_radius_spread : 0.0;
  for (int i = 0; i < n_sat; ++i) {
    const double angle = uniform(engine, 0.0, 2.0 * std::numbers::pi);
    const double dist = main_r * uniform(engine, 0.75, 1.0);
    const double base = uniform(engine, g.satellite_radius_min, g.satellite_radius_max);
    const double extra = uniform(engine, -1.0, 1.0);
    const double r = size * std::max(0.01, base + spread * extra);
    mask.polygons.push_back(
        make_blob(cx + dist * std::cos(angle), cy + dist * std::sin(angle), r, g, engine, size));
  }
  return mask;
}

struct Latent {
  double expression;  // in [0, 1]: how malignant the lesion looks
  double strength;    // multiplicative staining strength (optical density)
};

Latent draw_latent(SlideLabel label, Stain stain, const SiteProfile& site,
                   const SynthConfig& cfg, std::uint64_t slide_seed) {
  const std::uint64_t stain_index = stain == Stain::HE ? 1 : 2;
  std::normal_distribution<double> normal(0.0, 1.0);
  Engine deviation = make_engine(slide_seed, stream_id("latent"),
                                 cfg.complementary_signal ? stain_index : 0);
  const double z = normal(deviation);
  Engine batch = make_engine(slide_seed, stream_id("strength"), stain_index);
  const double zs = normal(batch);
  Engine artifacts = make_engine(slide_seed, stream_id("preparation"), stain_index);
  const double zp = normal(artifacts);

  const double preparation =
      stain == Stain::HE ? cfg.preparation_noise_he : cfg.preparation_noise_melana;
  const double sign = is_malignant(label) ? 1.0 : -1.0;
  const double s = sign * cfg.effect_size + cfg.slide_noise * z +
                   preparation * site.stain_variability * zp;
  return {std::clamp(0.5 + 0.3 * s, 0.0, 1.0), std::exp(site.stain_variability * zs)};
}

// Transmitted light through a stain layer of given optical-density scale.
inline double absorb(double background, double stain_color, double density) {
  return background * std::pow(stain_color / 255.0, density);
}

struct Canvas {
  int size;
  std::vector<Rgb> px;
  const std::vector<std::uint8_t>* lesion;

  bool in_lesion(int x, int y) const {
    return (*lesion)[static_cast<std::size_t>(y) * size + x] != 0;
  }

  // Disc of absorbing stain. Lesion-only marks are clipped to the lesion mask.
  void stamp(double cx, double cy, double radius, const Rgb& color, double density,
             bool lesion_only) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + radius)));
    const double r2 = radius * radius;
    const double fr = absorb(1.0, color.r, density);
    const double fg = absorb(1.0, color.g, density);
    const double fb = absorb(1.0, color.b, density);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (dx * dx + dy * dy > r2) continue;
        if (lesion_only && !in_lesion(x, y)) continue;
        Rgb& p = px[static_cast<std::size_t>(y) * size + x];
        p.r *= fr;
        p.g *= fg;
        p.b *= fb;
      }
    }
  }
};

// Thinned Poisson scatter: candidates at max density, kept with probability
// density(x, y) / max_density.
template <typename Fn>
void scatter(int size, double density_out, double density_in, const Canvas& canvas, Engine& engine,
             Fn&& place) {
  const double max_density = std::max(density_out, density_in);
  if (max_density <= 0.0) return;
  const double expected = max_density * static_cast<double>(size) * size;
  const int n = std::poisson_distribution<int>(expected)(engine);
  for (int i = 0; i < n; ++i) {
    const double x = uniform(engine, 0.0, size);
    const double y = uniform(engine, 0.0, size);
    const double keep = uniform01(engine);
    const int ix = std::min(size - 1, static_cast<int>(x));
    const int iy = std::min(size - 1, static_cast<int>(y));
    const double d = canvas.in_lesion(ix, iy) ? density_in : density_out;
    if (keep * max_density < d) place(x, y, canvas.in_lesion(ix, iy));
  }
}

void apply_site_transform(RgbImage& image, const StainTransform& t) {
  if (t.is_identity()) return;
  const double hue = t.hue_shift_deg / 360.0;
  // Direct-mapped memo of recent colors; slides reuse far fewer colors than pixels.
  constexpr std::size_t kSlots = 1 << 16;
  std::vector<std::uint32_t> keys(kSlots, 0xffffffffu);
  std::vector<std::array<std::uint8_t, 3>> values(kSlots);
  for (std::size_t i = 0; i < image.pixels.size(); i += 3) {
    std::uint8_t* p = &image.pixels[i];
    const std::uint32_t key = (std::uint32_t{p[0]} << 16) | (std::uint32_t{p[1]} << 8) | p[2];
    const std::size_t slot = (key * 2654435761u) >> 16 & (kSlots - 1);
    if (keys[slot] == key) {
      std::copy(values[slot].begin(), values[slot].end(), p);
      continue;
    }
    Hsv hsv = rgb_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
    hsv.h += hue;
    hsv.s = std::min(1.0, hsv.s * t.saturation_scale);
    hsv.v = std::min(1.0, hsv.v * t.brightness_scale);
    double r, g, b;
    hsv_to_rgb(hsv, r, g, b);
    p[0] = static_cast<std::uint8_t>(r * 255.0 + 0.5);
    p[1] = static_cast<std::uint8_t>(g * 255.0 + 0.5);
    p[2] = static_cast<std::uint8_t>(b * 255.0 + 0.5);
    keys[slot] = key;
    values[slot] = {p[0], p[1], p[2]};
  }
}

}  // namespace

GeneratedSlide generate_slide(SlideLabel label, const SiteProfile& site, Stain stain,
                              const SynthConfig& config, std::uint64_t slide_seed,
                              const std::string& slide_id) {
  config.validate();
  site.validate();
  const int size = config.image_size;

  GeneratedSlide out;
  out.mask = make_lesion(config, is_malignant(label), slide_seed, slide_id);
  const std::vector<std::uint8_t> lesion = rasterize_mask(out.mask, size, size, 1.0);
  const Latent latent = draw_latent(label, stain, site, config, slide_seed);
  const double a = latent.expression;

  Engine engine = make_engine(slide_seed, stream_id("texture"), stain == Stain::HE ? 1 : 2);
  const ValueNoise coarse(size, size, 96, engine);
  const ValueNoise fine(size, size, 24, engine);

  Canvas canvas{size, std::vector<Rgb>(static_cast<std::size_t>(size) * size), &lesion};
  const Rgb stroma = stain == Stain::HE ? Rgb{238, 176, 206} : Rgb{230, 228, 238};
  const Rgb lesion_bg = stain == Stain::HE ? Rgb{226, 164, 204} : Rgb{226, 222, 234};
  std::vector<double> coarse_row(static_cast<std::size_t>(size));
  std::vector<double> fine_row(static_cast<std::size_t>(size));
  for (int y = 0; y < size; ++y) {
    coarse.row(y, coarse_row);
    fine.row(y, fine_row);
    for (int x = 0; x < size; ++x) {
      const auto xi = static_cast<std::size_t>(x);
      const double n = 0.06 * coarse_row[xi] + 0.025 * fine_row[xi];
      const Rgb& base = canvas.in_lesion(x, y) ? lesion_bg : stroma;
      canvas.px[static_cast<std::size_t>(y) * size + x] = {
          base.r * (1.0 + n), base.g * (1.0 + n), base.b * (1.0 + 0.6 * n)};
    }
  }

  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  if (stain == Stain::HE) {
    // Nuclei: denser, larger and darker in malignant-looking lesions.
    const Rgb nucleus{92, 52, 140};
    const double density = 0.4 + 0.9 * a;
    scatter(size, 0.0012, 0.0025 + 0.0035 * a, canvas, engine, [&](double x, double y, bool in) {
      const double radius = in ? 2.6 + 2.4 * a + 0.7 * jitter(engine) : 2.6 + 0.5 * jitter(engine);
      canvas.stamp(x, y, radius, nucleus, in ? density : 0.5, false);
    });
  } else {
    const Rgb counterstain{150, 150, 205};
    scatter(size, 0.0014, 0.0018, canvas, engine, [&](double x, double y, bool) {
      canvas.stamp(x, y, 2.6 + 0.5 * jitter(engine), counterstain, 0.6, false);
    });
    // Melanocytes stained by the red chromogen, lesion only.
    const Rgb chromogen{182, 44, 58};
    const double density = site.chromogen_intensity * latent.strength * (0.55 + 0.5 * a);
    scatter(size, 0.0, 0.0004 + 0.0022 * a, canvas, engine, [&](double x, double y, bool) {
      canvas.stamp(x, y, 3.5 + 3.0 * a + 1.2 * jitter(engine), chromogen, density, true);
    });
  }

  out.image.slide_id = slide_id;
  out.image.stain = stain;
  out.image.um_per_px = config.base_um_per_px;
  out.image.pixels = RgbImage(size, size);
  // Global staining strength: optical density scales by `strength` for H&E.
  const double od_scale = stain == Stain::HE ? latent.strength : 1.0;
  std::array<std::uint8_t, 256> od_lut;
  for (int v = 0; v < 256; ++v) {
    od_lut[static_cast<std::size_t>(v)] =
        static_cast<std::uint8_t>(std::lround(255.0 * std::pow(v / 255.0, od_scale)));
  }
  for (std::size_t i = 0; i < canvas.px.size(); ++i) {
    const Rgb& p = canvas.px[i];
    std::uint8_t* dst = &out.image.pixels.pixels[3 * i];
    const double c[3] = {p.r, p.g, p.b};
    for (int k = 0; k < 3; ++k) {
      dst[k] = od_lut[static_cast<std::size_t>(std::clamp(c[k], 0.0, 255.0) + 0.5)];
    }
  }
  apply_site_transform(out.image.pixels, stain == Stain::HE ? site.he : site.melana);
  return out;
}

// ---------------------------------------------------------------------------

void write_manifest(const std::filesystem::path& path, const CohortManifest& manifest) {
  nlohmann::json entries = nlohmann::json::array();
  for (const ManifestEntry& e : manifest.entries) {
    entries.push_back({{"slide_id", e.slide_id},
                       {"site", e.site},
                       {"label", std::string(to_string(e.label))},
                       {"split", e.split},
                       {"stains", {{"HE", e.he_path}, {"MelanA", e.melana_path}}},
                       {"annotation", e.annotation_path}});
  }
  const nlohmann::json doc = {{"cohort_id", manifest.cohort_id}, {"entries", std::move(entries)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write manifest '" + path.string() + "'");
  out << doc.dump(2) << '\n';
}

CohortManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest '" + path.string() + "'");
  CohortManifest m;
  m.base_dir = path.parent_path();
  try {
    const nlohmann::json doc = nlohmann::json::parse(in);
    m.cohort_id = doc.at("cohort_id").get<std::string>();
    for (const auto& e : doc.at("entries")) {
      ManifestEntry entry;
      entry.slide_id = e.at("slide_id").get<std::string>();
      entry.site = e.at("site").get<std::string>();
      entry.label = parse_slide_label(e.at("label").get<std::string>());
      entry.split = e.value("split", std::string("test"));
      const auto& stains = e.at("stains");
      entry.he_path = stains.value("HE", std::string());
      entry.melana_path = stains.value("MelanA", std::string());
      entry.annotation_path = e.at("annotation").get<std::string>();
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest '" + path.string() + "': " + e.what());
  }
  return m;
}

std::vector<CohortManifest> generate_cohorts(const SynthConfig& config,
                                             const std::filesystem::path& out_dir,
                                             unsigned workers) {
  config.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "annotations");

  struct Job {
    const SiteProfile* site;
    std::size_t cohort;
    ManifestEntry entry;
    std::uint64_t seed;
  };
  std::vector<CohortManifest> manifests;
  std::vector<Job> jobs;
  const std::uint64_t synth_seed = derive_seed(config.seed, "synthesis");

  for (std::size_t si = 0; si < config.sites.size(); ++si) {
    const SynthSite& site = config.sites[si];
    CohortManifest manifest;
    manifest.cohort_id = "site" + site.profile.site_id;
    manifest.base_dir = out_dir;

    const int n = site.n_slides_per_class;
    const int n_train = si == 0 ? static_cast<int>(std::lround(config.train_fraction * n)) : 0;
    // Label order within a site is shuffled so slide ids carry no label.
    std::vector<int> order(static_cast<std::size_t>(2 * n));
    for (int i = 0; i < 2 * n; ++i) order[static_cast<std::size_t>(i)] = i;
    Engine shuffle = make_engine(synth_seed, stream_id("order:" + site.profile.site_id));
    std::shuffle(order.begin(), order.end(), shuffle);
    Engine situ = make_engine(synth_seed, stream_id("in_situ:" + site.profile.site_id));

    for (int k = 0; k < 2 * n; ++k) {
      const int slot = order[static_cast<std::size_t>(k)];
      const bool malignant = slot < n;
      const int rank_in_class = malignant ? slot : slot - n;
      ManifestEntry e;
      e.slide_id = fmt::format("{}_{:04d}", site.profile.site_id, k);
      e.site = site.profile.site_id;
      e.label = SlideLabel::Nevus;
      if (malignant) {
        e.label = uniform01(situ) < config.in_situ_fraction ? SlideLabel::InSitu
                                                            : SlideLabel::Melanoma;
      }
      e.split = si == 0 ? (rank_in_class < n_train ? "train" : "holdout") : "test";
      e.he_path = "images/" + e.slide_id + "_HE.png";
      e.melana_path = "images/" + e.slide_id + "_MelanA.png";
      e.annotation_path = "annotations/" + e.slide_id + ".json";
      manifest.entries.push_back(e);
      jobs.push_back({&site.profile, si, e, mix_seed(synth_seed, stream_id(e.slide_id))});
    }
    manifests.push_back(std::move(manifest));
  }

  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const Job& job = jobs[i];
    for (Stain stain : {Stain::HE, Stain::MelanA}) {
      GeneratedSlide slide =
          generate_slide(job.entry.label, *job.site, stain, config, job.seed, job.entry.slide_id);
      write_png(out_dir / (stain == Stain::HE ? job.entry.he_path : job.entry.melana_path),
                slide.image.pixels);
      if (stain == Stain::HE) write_annotation(out_dir / job.entry.annotation_path, slide.mask);
    }
  });

  for (const CohortManifest& m : manifests) {
    write_manifest(out_dir / manifest_file_name(m.cohort_id), m);
  }
  return manifests;
}

}  // namespace stainfuse
