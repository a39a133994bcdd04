#include "stainfuse/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/parallel.hpp"
#include "stainfuse/random.hpp"

namespace stainfuse {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

const ScorerSpec& PipelineConfig::he_scorer() const {
  for (const ScorerSpec& s : scorers) {
    if (s.stain == Stain::HE) return s;
  }
  throw ConfigError("config needs one H&E scorer");
}

std::vector<const ScorerSpec*> PipelineConfig::melana_scorers() const {
  std::vector<const ScorerSpec*> out;
  for (const ScorerSpec& s : scorers) {
    if (s.stain == Stain::MelanA) out.push_back(&s);
  }
  return out;
}

void PipelineConfig::validate() const {
  std::set<std::string> ids;
  int he_count = 0;
  for (const ScorerSpec& s : scorers) {
    if (s.model_id.empty() || s.model_id.find(',') != std::string::npos) {
      throw ConfigError(fmt::format("invalid scorer model_id '{}'", s.model_id));
    }
    if (!ids.insert(s.model_id).second) {
      throw ConfigError(fmt::format("duplicate scorer model_id '{}'", s.model_id));
    }
    if (s.stain == Stain::HE) ++he_count;
    if (s.epochs < 0 || !(s.learning_rate > 0.0) || s.sampling_number < 1) {
      throw ConfigError(fmt::format("scorer '{}': invalid training parameters", s.model_id));
    }
  }
  if (he_count != 1) throw ConfigError("config needs exactly one H&E scorer");
  if (melana_scorers().empty()) throw ConfigError("config needs at least one MelanA scorer");
  if (training.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (training.jitter_variants < 0) throw ConfigError("training.jitter_variants must be >= 0");
  if (training.cv_folds < 2) throw ConfigError("training.cv_folds must be >= 2");
  training.jitter.validate();
  bootstrap.validate();
  slide_bootstrap.validate();
  if (!(tessellation.min_coverage >= 0.0 && tessellation.min_coverage <= 1.0)) {
    throw ConfigError("tessellation.min_coverage must lie in [0, 1]");
  }
  synth.validate();
}

PipelineConfig default_pipeline_config() {
  PipelineConfig cfg;
  cfg.synth = default_synth_config();
  cfg.synth.seed = cfg.seed;
  cfg.bootstrap = {10000, 0.05, 0};
  cfg.slide_bootstrap = {10000, 0.05, 0};
  // Learning rate, epochs and sampling number per scorer follow the tuned
  // values of the reference networks.
  cfg.scorers = {
      {"HE_X40", Stain::HE, MagLevel::X40, 20, 2.5e-4, 598, "ResNet50", "catavgmax"},
      {"MelanA_X40", Stain::MelanA, MagLevel::X40, 23, 2.3e-4, 405, "ResNet18", "max"},
      {"MelanA_X20", Stain::MelanA, MagLevel::X20, 18, 5.7e-4, 270, "ResNet18", "max"},
      {"MelanA_X10", Stain::MelanA, MagLevel::X10, 23, 2.5e-4, 205, "ResNet34", "catavgmax"},
      {"MelanA_X5", Stain::MelanA, MagLevel::X5, 25, 6.4e-4, 266, "ResNet50", "max"},
  };
  return cfg;
}

namespace {

json transform_to_json(const StainTransform& t) {
  return {{"hue_shift_deg", t.hue_shift_deg},
          {"saturation_scale", t.saturation_scale},
          {"brightness_scale", t.brightness_scale}};
}

StainTransform transform_from_json(const json& j, StainTransform t) {
  t.hue_shift_deg = j.value("hue_shift_deg", t.hue_shift_deg);
  t.saturation_scale = j.value("saturation_scale", t.saturation_scale);
  t.brightness_scale = j.value("brightness_scale", t.brightness_scale);
  return t;
}

json bootstrap_to_json(const BootstrapConfig& b) {
  return {{"n_boot", b.n_boot}, {"alpha", b.alpha}};
}

BootstrapConfig bootstrap_from_json(const json& j, BootstrapConfig b) {
  b.n_boot = j.value("n_boot", b.n_boot);
  b.alpha = j.value("alpha", b.alpha);
  return b;
}

json synth_to_json(const SynthConfig& s) {
  json sites = json::array();
  for (const SynthSite& site : s.sites) {
    const SiteProfile& p = site.profile;
    sites.push_back({{"site_id", p.site_id},
                     {"n_slides_per_class", site.n_slides_per_class},
                     {"he", transform_to_json(p.he)},
                     {"melana", transform_to_json(p.melana)},
                     {"chromogen_intensity", p.chromogen_intensity},
                     {"stain_variability", p.stain_variability}});
  }
  const LesionGeometry& g = s.lesion;
  return {{"image_size", s.image_size},
          {"base_um_per_px", s.base_um_per_px},
          {"effect_size", s.effect_size},
          {"slide_noise", s.slide_noise},
          {"preparation_noise_he", s.preparation_noise_he},
          {"preparation_noise_melana", s.preparation_noise_melana},
          {"complementary_signal", s.complementary_signal},
          {"in_situ_fraction", s.in_situ_fraction},
          {"train_fraction", s.train_fraction},
          {"lesion",
           {{"main_radius", g.main_radius},
            {"harmonic_amplitude", g.harmonic_amplitude},
            {"min_satellites", g.min_satellites},
            {"max_satellites", g.max_satellites},
            {"satellite_radius_min", g.satellite_radius_min},
            {"satellite_radius_max", g.satellite_radius_max},
            {"melanoma_radius_spread", g.melanoma_radius_spread},
            {"vertices_per_blob", g.vertices_per_blob}}},
          {"sites", std::move(sites)}};
}

SynthConfig synth_from_json(const json& j, SynthConfig s) {
  s.image_size = j.value("image_size", s.image_size);
  s.base_um_per_px = j.value("base_um_per_px", s.base_um_per_px);
  s.effect_size = j.value("effect_size", s.effect_size);
  s.slide_noise = j.value("slide_noise", s.slide_noise);
  s.preparation_noise_he = j.value("preparation_noise_he", s.preparation_noise_he);
  s.preparation_noise_melana = j.value("preparation_noise_melana", s.preparation_noise_melana);
  s.complementary_signal = j.value("complementary_signal", s.complementary_signal);
  s.in_situ_fraction = j.value("in_situ_fraction", s.in_situ_fraction);
  s.train_fraction = j.value("train_fraction", s.train_fraction);
  if (j.contains("lesion")) {
    const json& l = j.at("lesion");
    LesionGeometry& g = s.lesion;
    g.main_radius = l.value("main_radius", g.main_radius);
    g.harmonic_amplitude = l.value("harmonic_amplitude", g.harmonic_amplitude);
    g.min_satellites = l.value("min_satellites", g.min_satellites);
    g.max_satellites = l.value("max_satellites", g.max_satellites);
    g.satellite_radius_min = l.value("satellite_radius_min", g.satellite_radius_min);
    g.satellite_radius_max = l.value("satellite_radius_max", g.satellite_radius_max);
    g.melanoma_radius_spread = l.value("melanoma_radius_spread", g.melanoma_radius_spread);
    g.vertices_per_blob = l.value("vertices_per_blob", g.vertices_per_blob);
  }
  if (j.contains("sites")) {
    std::vector<SynthSite> defaults = s.sites;
    s.sites.clear();
    for (std::size_t i = 0; i < j.at("sites").size(); ++i) {
      const json& sj = j.at("sites")[i];
      SynthSite site = i < defaults.size() ? defaults[i] : SynthSite{};
      site.profile.site_id = sj.value("site_id", site.profile.site_id);
      site.n_slides_per_class = sj.value("n_slides_per_class", site.n_slides_per_class);
      if (sj.contains("he")) site.profile.he = transform_from_json(sj.at("he"), site.profile.he);
      if (sj.contains("melana")) {
        site.profile.melana = transform_from_json(sj.at("melana"), site.profile.melana);
      }
      site.profile.chromogen_intensity =
          sj.value("chromogen_intensity", site.profile.chromogen_intensity);
      site.profile.stain_variability = sj.value("stain_variability", site.profile.stain_variability);
      s.sites.push_back(std::move(site));
    }
  }
  return s;
}

}  // namespace

std::string pipeline_config_to_json(const PipelineConfig& c) {
  json scorers = json::array();
  for (const ScorerSpec& s : c.scorers) {
    scorers.push_back({{"model_id", s.model_id},
                       {"stain", std::string(to_string(s.stain))},
                       {"magnification", std::string(to_string(s.magnification))},
                       {"epochs", s.epochs},
                       {"learning_rate", s.learning_rate},
                       {"sampling_number", s.sampling_number},
                       {"reference_architecture", s.reference_architecture},
                       {"reference_pooling", s.reference_pooling}});
  }
  const TrainingOptions& t = c.training;
  json doc = {
      {"seed", c.seed},
      {"workers", c.workers},
      {"paths", {{"output_root", c.output_root.generic_string()},
                 {"data_root", c.data_root.generic_string()}}},
      {"synth", synth_to_json(c.synth)},
      {"tessellation", {{"min_coverage", c.tessellation.min_coverage}, {"write_tiles", c.write_tiles}}},
      {"training",
       {{"batch_size", t.batch_size},
        {"jitter_variants", t.jitter_variants},
        {"cv_folds", t.cv_folds},
        {"jitter",
         {{"brightness", t.jitter.brightness},
          {"contrast", t.jitter.contrast},
          {"saturation", t.jitter.saturation},
          {"hue", t.jitter.hue}}}}},
      {"scorers", std::move(scorers)},
      {"fusion", {{"mode", std::string(to_string(c.fusion_mode))},
                  {"layout", std::string(to_string(c.fusion_layout))}}},
      {"bootstrap", bootstrap_to_json(c.bootstrap)},
      {"slide_bootstrap", bootstrap_to_json(c.slide_bootstrap)},
      {"train_cohort", c.train_cohort},
      {"in_situ_as_melanoma", c.in_situ_as_melanoma},
      {"external_scores", c.external_scores ? json(c.external_scores->generic_string()) : json(nullptr)},
  };
  return doc.dump(2);
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  PipelineConfig c = default_pipeline_config();
  try {
    const json j = json::parse(text);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      c.output_root = p.value("output_root", c.output_root.string());
      c.data_root = p.value("data_root", c.data_root.string());
    }
    if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"), c.synth);
    if (j.contains("tessellation")) {
      const json& t = j.at("tessellation");
      c.tessellation.min_coverage = t.value("min_coverage", c.tessellation.min_coverage);
      c.write_tiles = t.value("write_tiles", c.write_tiles);
    }
    if (j.contains("training")) {
      const json& t = j.at("training");
      c.training.batch_size = t.value("batch_size", c.training.batch_size);
      c.training.jitter_variants = t.value("jitter_variants", c.training.jitter_variants);
      c.training.cv_folds = t.value("cv_folds", c.training.cv_folds);
      if (t.contains("jitter")) {
        const json& jt = t.at("jitter");
        JitterParams& p = c.training.jitter;
        p.brightness = jt.value("brightness", p.brightness);
        p.contrast = jt.value("contrast", p.contrast);
        p.saturation = jt.value("saturation", p.saturation);
        p.hue = jt.value("hue", p.hue);
      }
    }
    if (j.contains("scorers")) {
      c.scorers.clear();
      for (const json& s : j.at("scorers")) {
        ScorerSpec spec;
        spec.model_id = s.at("model_id").get<std::string>();
        spec.stain = parse_stain(s.at("stain").get<std::string>());
        spec.magnification = parse_mag_level(s.at("magnification").get<std::string>());
        spec.epochs = s.value("epochs", spec.epochs);
        spec.learning_rate = s.value("learning_rate", spec.learning_rate);
        spec.sampling_number = s.value("sampling_number", spec.sampling_number);
        spec.reference_architecture = s.value("reference_architecture", std::string());
        spec.reference_pooling = s.value("reference_pooling", std::string());
        c.scorers.push_back(std::move(spec));
      }
    }
    if (j.contains("fusion")) {
      const json& f = j.at("fusion");
      c.fusion_mode = parse_fusion_mode(f.value("mode", std::string(to_string(c.fusion_mode))));
      c.fusion_layout = parse_fusion_layout(f.value("layout", std::string(to_string(c.fusion_layout))));
    }
    if (j.contains("bootstrap")) c.bootstrap = bootstrap_from_json(j.at("bootstrap"), c.bootstrap);
    if (j.contains("slide_bootstrap")) {
      c.slide_bootstrap = bootstrap_from_json(j.at("slide_bootstrap"), c.slide_bootstrap);
    }
    c.train_cohort = j.value("train_cohort", c.train_cohort);
    c.in_situ_as_melanoma = j.value("in_situ_as_melanoma", c.in_situ_as_melanoma);
    if (j.contains("external_scores") && !j.at("external_scores").is_null()) {
      c.external_scores = j.at("external_scores").get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.synth.seed = c.seed;
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return pipeline_config_from_json(text);
  } catch (const ConfigError& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
}

std::string config_hash(const PipelineConfig& config) {
  json doc = json::parse(pipeline_config_to_json(config));
  doc.erase("workers");  // never affects results
  return fmt::format("{:016x}", stream_id(doc.dump()));
}

// ---------------------------------------------------------------------------
// Data access

std::vector<CohortManifest> run_synth(const PipelineConfig& config) {
  SynthConfig synth = config.synth;
  synth.seed = config.seed;
  const fs::path root = config.resolved_data_root();
  spdlog::info("synth: generating {} sites under {}", synth.sites.size(), root.string());
  return generate_cohorts(synth, root, config.workers);
}

std::vector<CohortManifest> load_manifests(const PipelineConfig& config) {
  const fs::path root = config.resolved_data_root();
  if (!fs::is_directory(root)) {
    throw ConfigError("data root '" + root.string() + "' does not exist; run synth first");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("manifest_", 0) == 0 && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<CohortManifest> manifests;
  for (const fs::path& f : files) manifests.push_back(read_manifest(f));
  if (manifests.empty()) throw ConfigError("no manifest_*.json under '" + root.string() + "'");
  return manifests;
}

std::optional<BinaryLabel> binary_label(SlideLabel label, bool in_situ_as_melanoma) noexcept {
  switch (label) {
    case SlideLabel::Melanoma: return BinaryLabel::Melanoma;
    case SlideLabel::Nevus: return BinaryLabel::Nevus;
    case SlideLabel::InSitu:
      if (in_situ_as_melanoma) return BinaryLabel::Melanoma;
      return std::nullopt;
  }
  return std::nullopt;
}

namespace {

struct EvalCohort {
  std::string cohort_id;
  const CohortManifest* manifest;
  std::vector<ManifestEntry> entries;
};

const CohortManifest& find_manifest(const std::vector<CohortManifest>& manifests,
                                    const std::string& cohort_id) {
  for (const CohortManifest& m : manifests) {
    if (m.cohort_id == cohort_id) return m;
  }
  throw ConfigError(fmt::format("training cohort '{}' has no manifest", cohort_id));
}

std::vector<ManifestEntry> labelled(const std::vector<ManifestEntry>& entries, bool in_situ) {
  std::vector<ManifestEntry> out;
  for (const ManifestEntry& e : entries) {
    if (binary_label(e.label, in_situ)) out.push_back(e);
  }
  return out;
}

std::vector<ManifestEntry> training_entries(const PipelineConfig& config,
                                            const std::vector<CohortManifest>& manifests) {
  const CohortManifest& m = find_manifest(manifests, config.train_cohort);
  std::vector<ManifestEntry> out;
  for (const ManifestEntry& e : m.entries) {
    if (e.split == "train") out.push_back(e);
  }
  return labelled(out, config.in_situ_as_melanoma);
}

// InD holdout split of the training cohort, then every other cohort in full.
std::vector<EvalCohort> evaluation_cohorts(const PipelineConfig& config,
                                           const std::vector<CohortManifest>& manifests) {
  std::vector<EvalCohort> out;
  for (const CohortManifest& m : manifests) {
    EvalCohort c{m.cohort_id, &m, {}};
    if (m.cohort_id == config.train_cohort) {
      c.cohort_id += "_holdout";
      for (const ManifestEntry& e : m.entries) {
        if (e.split == "holdout") c.entries.push_back(e);
      }
    } else {
      c.entries = m.entries;
    }
    c.entries = labelled(c.entries, config.in_situ_as_melanoma);
    out.push_back(std::move(c));
  }
  std::stable_partition(out.begin(), out.end(), [&](const EvalCohort& c) {
    return c.manifest->cohort_id == config.train_cohort;
  });
  return out;
}

std::map<std::string, BinaryLabel> label_index(const std::vector<ManifestEntry>& entries,
                                               bool in_situ) {
  std::map<std::string, BinaryLabel> out;
  for (const ManifestEntry& e : entries) {
    if (auto l = binary_label(e.label, in_situ)) out[e.slide_id] = *l;
  }
  return out;
}

fs::path models_dir(const PipelineConfig& c) { return c.output_root / "models"; }
fs::path validation_dir(const PipelineConfig& c) { return c.output_root / "validation"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

FeatureTable extract_cohort_features(const PipelineConfig& config, const CohortManifest& manifest,
                                     const std::vector<ManifestEntry>& entries, bool augment) {
  const std::uint64_t jitter_seed = derive_seed(config.seed, "jitter");
  const int n_variants = augment ? config.training.jitter_variants : 0;

  // slots[entry][scorer]
  std::vector<std::vector<SlideFeatures>> slots(entries.size());
  parallel_for(entries.size(), config.workers, [&](std::size_t i) {
    const ManifestEntry& e = entries[i];
    AnnotationMask mask;
    try {
      mask = read_annotation(manifest.resolve(e.annotation_path));
    } catch (const Error& err) {
      throw StageError("tessellate", e.slide_id, err.what());
    }
    std::map<Stain, SlideImage> base;
    std::map<std::pair<Stain, MagLevel>, SlideImage> scaled;
    slots[i].resize(config.scorers.size());
    for (std::size_t s = 0; s < config.scorers.size(); ++s) {
      const ScorerSpec& spec = config.scorers[s];
      try {
        if (!base.count(spec.stain)) {
          const std::string& rel = spec.stain == Stain::HE ? e.he_path : e.melana_path;
          if (rel.empty()) throw Error(fmt::format("no {} image", to_string(spec.stain)));
          SlideImage img{e.slide_id, spec.stain, kBaseUmPerPx, read_png(manifest.resolve(rel))};
          base.emplace(spec.stain, std::move(img));
        }
        const auto key = std::make_pair(spec.stain, spec.magnification);
        if (!scaled.count(key)) scaled.emplace(key, downscale(base.at(spec.stain), spec.magnification));
        const SlideImage& image = scaled.at(key);

        SlideFeatures sf;
        sf.slide_id = e.slide_id;
        sf.tiles = tessellate(image, mask, spec.magnification, config.tessellation);
        if (sf.tiles.empty()) {
          throw Error(fmt::format("no tiles at {} (lesion coverage below {})",
                                  to_string(spec.magnification), config.tessellation.min_coverage));
        }
        const std::uint64_t tile_stream = stream_id(spec.model_id + "/" + e.slide_id);
        for (std::size_t t = 0; t < sf.tiles.size(); ++t) {
          const RgbImage tile = extract_tile(image, sf.tiles[t]);
          std::vector<FeatureVector> variants{extract_features(tile)};
          for (int v = 0; v < n_variants; ++v) {
            const std::uint64_t seed = mix_seed(jitter_seed, tile_stream, t * 1024 + static_cast<std::size_t>(v));
            variants.push_back(extract_features(color_jitter(tile, config.training.jitter, seed)));
          }
          sf.variants.push_back(std::move(variants));
        }
        slots[i][s] = std::move(sf);
      } catch (const StageError&) {
        throw;
      } catch (const Error& err) {
        throw StageError("tessellate", e.slide_id, err.what());
      }
    }
  });

  FeatureTable table;
  for (std::size_t s = 0; s < config.scorers.size(); ++s) {
    auto& column = table[config.scorers[s].model_id];
    for (auto& slot : slots) column.push_back(std::move(slot[s]));
  }
  return table;
}

void run_tessellate(const PipelineConfig& config) {
  const auto manifests = load_manifests(config);
  const fs::path dir = config.output_root / "tiles";
  fs::create_directories(dir);
  for (const CohortManifest& m : manifests) {
    spdlog::info("tessellate: cohort {} ({} slides)", m.cohort_id, m.entries.size());
    std::vector<std::vector<TileRef>> per_slide(m.entries.size());
    parallel_for(m.entries.size(), config.workers, [&](std::size_t i) {
      const ManifestEntry& e = m.entries[i];
      try {
        const AnnotationMask mask = read_annotation(m.resolve(e.annotation_path));
        std::set<std::pair<Stain, MagLevel>> done;
        for (const ScorerSpec& spec : config.scorers) {
          if (!done.insert({spec.stain, spec.magnification}).second) continue;
          const std::string& rel = spec.stain == Stain::HE ? e.he_path : e.melana_path;
          const SlideImage base{e.slide_id, spec.stain, kBaseUmPerPx, read_png(m.resolve(rel))};
          const SlideImage image = downscale(base, spec.magnification);
          auto tiles = tessellate(image, mask, spec.magnification, config.tessellation);
          if (config.write_tiles) {
            const fs::path png_dir = dir / "png" / std::string(to_string(spec.stain));
            fs::create_directories(png_dir);
            for (const TileRef& t : tiles) write_png(png_dir / tile_png_name(t), extract_tile(image, t));
          }
          per_slide[i].insert(per_slide[i].end(), tiles.begin(), tiles.end());
        }
      } catch (const Error& err) {
        throw StageError("tessellate", e.slide_id, err.what());
      }
    });
    std::vector<TileRef> all;
    for (auto& v : per_slide) all.insert(all.end(), v.begin(), v.end());
    std::ofstream out(dir / (m.cohort_id + ".csv"), std::ios::binary);
    write_tile_manifest(out, all);
  }
}

// ---------------------------------------------------------------------------
// Training and threshold selection

namespace {

FusionConfig calibrate_from_validation(const PipelineConfig& config,
                                       const std::vector<SlidePrediction>& validation,
                                       std::map<std::string, DecisionThreshold>& thresholds) {
  FusionConfig fusion;
  fusion.mode = config.fusion_mode;
  fusion.layout = config.fusion_layout;
  for (const ScorerSpec& spec : config.scorers) {
    CohortPredictions cohort;
    cohort.cohort_id = config.train_cohort + "_validation";
    for (const SlidePrediction& p : validation) {
      if (p.model_id == spec.model_id && p.label) cohort.entries.push_back({p.slide_id, p.score, *p.label});
    }
    std::sort(cohort.entries.begin(), cohort.entries.end(),
              [](const CohortEntry& a, const CohortEntry& b) { return a.slide_id < b.slide_id; });
    try {
      const DecisionThreshold t = select_threshold(cohort);
      thresholds[spec.model_id] = t;
      fusion.models.push_back({spec.model_id, t.value, auroc(cohort)});
    } catch (const Error& err) {
      throw StageError("select_threshold", "", fmt::format("{}: {}", spec.model_id, err.what()));
    }
  }
  fusion.normalize();
  return fusion;
}

void write_validation_artifacts(const PipelineConfig& config, const TrainingResult& r) {
  const fs::path dir = validation_dir(config);
  fs::create_directories(dir);
  write_slide_predictions(dir / "validation_predictions.csv", r.validation_predictions);
  write_fusion_config(dir / "fusion_config.json", r.fusion);
  json thresholds = json::object();
  for (const auto& [id, t] : r.thresholds) {
    thresholds[id] = {{"value", t.value}, {"method", t.method},
                      {"source_cohort", t.source_cohort}, {"youden_j", t.youden_j}};
  }
  write_text(dir / "thresholds.json", thresholds.dump(2) + "\n");
  std::ostringstream folds;
  folds << "slide_id,fold\n";
  for (const auto& [slide, fold] : r.folds) folds << slide << ',' << fold << '\n';
  write_text(dir / "folds.csv", folds.str());
}

std::vector<SlidePrediction> aggregate_plain(const std::vector<TileScore>& scores,
                                             const std::map<std::string, BinaryLabel>& labels) {
  auto preds = aggregate_tile_scores(scores, std::nullopt, 1);
  for (SlidePrediction& p : preds) {
    if (auto it = labels.find(p.slide_id); it != labels.end()) p.label = it->second;
  }
  return preds;
}

std::vector<TileScore> score_slide(const ScorerModel& model, const SlideFeatures& sf) {
  std::vector<TileScore> out;
  out.reserve(sf.tiles.size());
  for (std::size_t t = 0; t < sf.tiles.size(); ++t) {
    out.push_back({sf.tiles[t], score_tile(model, sf.variants[t][0]), model.model_id});
  }
  return out;
}

}  // namespace

TrainingResult run_train(const PipelineConfig& config) {
  const auto manifests = load_manifests(config);
  const auto train = training_entries(config, manifests);
  const auto labels = label_index(train, config.in_situ_as_melanoma);
  TrainingResult result;

  // Stratified, seeded fold assignment.
  {
    std::vector<std::string> pos, neg;
    for (const auto& [id, label] : labels) (label == BinaryLabel::Melanoma ? pos : neg).push_back(id);
    Engine engine = make_engine(derive_seed(config.seed, "folds"));
    std::shuffle(pos.begin(), pos.end(), engine);
    std::shuffle(neg.begin(), neg.end(), engine);
    int k = 0;
    for (const auto* group : {&pos, &neg}) {
      for (const std::string& id : *group) result.folds[id] = k++ % config.training.cv_folds;
    }
  }

  if (config.external_scores) {
    spdlog::info("train: external scores given; using them as validation predictions");
    std::vector<TileScore> scores;
    for (TileScore& s : import_external_scores(*config.external_scores)) {
      if (labels.count(s.tile.slide_id)) scores.push_back(std::move(s));
    }
    result.validation_predictions = aggregate_plain(scores, labels);
    result.fusion = calibrate_from_validation(config, result.validation_predictions, result.thresholds);
    write_validation_artifacts(config, result);
    return result;
  }

  const CohortManifest& manifest = find_manifest(manifests, config.train_cohort);
  spdlog::info("train: extracting features for {} training slides", train.size());
  const FeatureTable features = extract_cohort_features(config, manifest, train, true);

  const int folds = config.training.cv_folds;
  struct Job {
    std::size_t scorer;
    int fold;  // == folds for the final model
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < config.scorers.size(); ++s) {
    for (int f = 0; f <= folds; ++f) jobs.push_back({s, f});
  }
  std::vector<ScorerModel> models(jobs.size());
  std::vector<std::vector<SlidePrediction>> oof(jobs.size());
  const std::uint64_t training_seed = derive_seed(config.seed, "training");

  spdlog::info("train: {} scorers x ({} folds + final)", config.scorers.size(), folds);
  parallel_for(jobs.size(), config.workers, [&](std::size_t j) {
    const ScorerSpec& spec = config.scorers[jobs[j].scorer];
    const int fold = jobs[j].fold;
    const auto& slides = features.at(spec.model_id);
    std::vector<TrainingSlide> train_set;
    std::vector<const SlideFeatures*> held_out;
    for (const SlideFeatures& sf : slides) {
      if (fold < folds && result.folds.at(sf.slide_id) == fold) {
        held_out.push_back(&sf);
        continue;
      }
      train_set.push_back({sf.slide_id,
                           labels.at(sf.slide_id) == BinaryLabel::Melanoma ? 1 : 0, sf.variants});
    }
    TrainConfig tc;
    tc.model_id = spec.model_id;
    tc.stain = spec.stain;
    tc.magnification = spec.magnification;
    tc.epochs = spec.epochs;
    tc.learning_rate = spec.learning_rate;
    tc.quota = spec.sampling_number;
    tc.batch_size = config.training.batch_size;
    tc.use_variants = config.training.jitter_variants > 0;
    tc.seed = mix_seed(training_seed, stream_id(spec.model_id), static_cast<std::uint64_t>(fold));
    tc.reference_architecture = spec.reference_architecture;
    tc.reference_pooling = spec.reference_pooling;
    try {
      models[j] = train_baseline_scorer(train_set, tc);
    } catch (const Error& err) {
      throw StageError("train", "", fmt::format("{} fold {}: {}", spec.model_id, fold, err.what()));
    }
    for (const SlideFeatures* sf : held_out) {
      std::vector<TileScore> scores = score_slide(models[j], *sf);
      auto preds = aggregate_plain(scores, labels);
      oof[j].insert(oof[j].end(), preds.begin(), preds.end());
    }
  });

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (jobs[j].fold == folds) result.models.push_back(models[j]);
    result.validation_predictions.insert(result.validation_predictions.end(), oof[j].begin(),
                                         oof[j].end());
  }
  std::sort(result.validation_predictions.begin(), result.validation_predictions.end(),
            [](const SlidePrediction& a, const SlidePrediction& b) {
              return std::tie(a.model_id, a.slide_id) < std::tie(b.model_id, b.slide_id);
            });
  for (SlidePrediction& p : result.validation_predictions) {
    p.stain = p.model_id == config.he_scorer().model_id ? Stain::HE : Stain::MelanA;
  }
  result.fusion = calibrate_from_validation(config, result.validation_predictions, result.thresholds);

  fs::create_directories(models_dir(config));
  for (const ScorerModel& m : result.models) save_model(models_dir(config) / (m.model_id + ".json"), m);
  write_validation_artifacts(config, result);
  return result;
}

namespace {

std::map<std::string, std::vector<TileScore>> score_cohorts(
    const PipelineConfig& config, const std::vector<CohortManifest>& manifests,
    const std::vector<ScorerModel>& models) {
  std::map<std::string, std::vector<TileScore>> out;
  const fs::path dir = config.output_root / "tile_scores";
  fs::create_directories(dir);
  for (const EvalCohort& cohort : evaluation_cohorts(config, manifests)) {
    spdlog::info("score: cohort {} ({} slides)", cohort.cohort_id, cohort.entries.size());
    const FeatureTable features = extract_cohort_features(config, *cohort.manifest, cohort.entries, false);
    std::vector<TileScore>& scores = out[cohort.cohort_id];
    for (const ScorerModel& model : models) {
      for (const SlideFeatures& sf : features.at(model.model_id)) {
        auto s = score_slide(model, sf);
        scores.insert(scores.end(), s.begin(), s.end());
      }
    }
    write_tile_scores(dir / (cohort.cohort_id + ".csv"), scores);
  }
  return out;
}

}  // namespace

std::map<std::string, std::vector<TileScore>> run_score(const PipelineConfig& config) {
  const auto manifests = load_manifests(config);
  std::vector<ScorerModel> models;
  for (const ScorerSpec& spec : config.scorers) {
    models.push_back(load_model(models_dir(config) / (spec.model_id + ".json")));
  }
  return score_cohorts(config, manifests, models);
}

// ---------------------------------------------------------------------------
// Fusion, evaluation and the full run

std::string fused_model_id(FusionMode mode, std::string_view product) {
  return fmt::format("fused:{}:{}", to_string(mode), product);
}

std::vector<ReportRowSpec> report_rows(const PipelineConfig& config) {
  std::vector<ReportRowSpec> rows;
  const ScorerSpec& he = config.he_scorer();
  rows.push_back({he.model_id, fmt::format("H&E ({:.2f} µm/px)", mag_resolution(he.magnification))});
  const auto melana = config.melana_scorers();
  for (const ScorerSpec* s : melana) {
    rows.push_back({s->model_id, fmt::format("MelanA ({:.2f} µm/px)", mag_resolution(s->magnification))});
  }
  rows.push_back({fused_model_id(config.fusion_mode, kProductMelanA),
                  fmt::format("MelanA (all {} combined)", melana.size())});
  rows.push_back({fused_model_id(config.fusion_mode, kProductMultimodal), "MelanA + H&E"});
  rows.push_back({fused_model_id(config.fusion_mode, kProductHierarchical), "MelanA + H&E (hierarchical)"});
  return rows;
}

std::vector<std::string> fuse_cohort(const PipelineConfig& config, const FusionConfig& fusion,
                                     double he_threshold,
                                     std::vector<SlidePrediction>& predictions) {
  const std::string he_id = config.he_scorer().model_id;
  const auto melana_specs = config.melana_scorers();

  std::map<std::string, std::map<std::string, const SlidePrediction*>> by_slide;
  for (const SlidePrediction& p : predictions) by_slide[p.slide_id][p.model_id] = &p;

  std::vector<SlidePrediction> fused;
  std::vector<std::string> uncertain;
  for (const auto& [slide, models] : by_slide) {
    auto get = [&](const std::string& id) -> const SlidePrediction& {
      const auto it = models.find(id);
      if (it == models.end()) throw StageError("fuse", slide, "missing prediction for " + id);
      return *it->second;
    };
    const SlidePrediction& he = get(he_id);
    std::vector<SlidePrediction> melana;
    for (const ScorerSpec* s : melana_specs) melana.push_back(get(s->model_id));

    if (!he.ci) throw StageError("fuse", slide, "H&E prediction lacks a confidence interval");
    if (he_threshold >= he.ci->low && he_threshold <= he.ci->high) uncertain.push_back(slide);

    for (FusionMode mode : kAllFusionModes) {
      FusionConfig cfg = fusion;
      cfg.mode = mode;
      auto emit = [&](const FusedPrediction& f, Stain stain, std::string_view product) {
        SlidePrediction p = to_slide_prediction(f, stain, fused_model_id(mode, product));
        p.label = he.label;
        p.n_tiles = he.n_tiles;
        fused.push_back(std::move(p));
      };
      try {
        emit(fuse(melana, cfg), Stain::MelanA, kProductMelanA);
        emit(fuse_multimodal(he, melana, cfg), Stain::HE, kProductMultimodal);
        emit(hierarchical_predict(he, he_threshold, melana, cfg), Stain::HE, kProductHierarchical);
      } catch (const StageError&) {
        throw;
      } catch (const Error& err) {
        throw StageError("fuse", slide, err.what());
      }
    }
  }
  predictions.insert(predictions.end(), fused.begin(), fused.end());
  return uncertain;
}

std::vector<RocResult> evaluate_predictions(const PipelineConfig& config,
                                            const std::string& cohort_id,
                                            const std::vector<SlidePrediction>& predictions) {
  std::map<std::string, CohortPredictions> by_model;
  for (const SlidePrediction& p : predictions) {
    if (!p.label) continue;
    CohortPredictions& c = by_model[p.model_id];
    c.cohort_id = cohort_id;
    c.entries.push_back({p.slide_id, p.score, *p.label});
  }
  // One seed per cohort: every model sees the same bootstrap replicates.
  BootstrapConfig boot = config.bootstrap;
  boot.seed = mix_seed(derive_seed(config.seed, "bootstrap"), stream_id(cohort_id));

  std::vector<RocResult> results;
  for (auto& [model_id, cohort] : by_model) {
    try {
      results.push_back(evaluate_cohort(cohort, boot, model_id, config.workers));
    } catch (const Error& err) {
      throw StageError("evaluate", "", fmt::format("{} on {}: {}", model_id, cohort_id, err.what()));
    }
  }
  return results;
}

RunSummary run_pipeline(const PipelineConfig& config) {
  config.validate();
  fs::create_directories(config.output_root);
  const auto manifests = load_manifests(config);
  const auto cohorts = evaluation_cohorts(config, manifests);

  const TrainingResult training = run_train(config);
  std::map<std::string, std::vector<TileScore>> tile_scores;
  if (config.external_scores) {
    std::map<std::string, std::string> slide_cohort;
    for (const EvalCohort& c : cohorts) {
      for (const ManifestEntry& e : c.entries) slide_cohort[e.slide_id] = c.cohort_id;
    }
    for (TileScore& s : import_external_scores(*config.external_scores)) {
      const auto it = slide_cohort.find(s.tile.slide_id);
      if (it != slide_cohort.end()) tile_scores[it->second].push_back(std::move(s));
    }
  } else {
    tile_scores = score_cohorts(config, manifests, training.models);
  }

  RunSummary summary;
  summary.fusion = training.fusion;
  summary.rows = report_rows(config);
  const double he_threshold = training.fusion.find(config.he_scorer().model_id).threshold;
  const fs::path pred_dir = config.output_root / "slide_predictions";
  fs::create_directories(pred_dir);

  BootstrapConfig slide_boot = config.slide_bootstrap;
  slide_boot.seed = derive_seed(config.seed, "slide_bootstrap");
  for (const EvalCohort& cohort : cohorts) {
    summary.cohorts.push_back(cohort.cohort_id);
    spdlog::info("aggregate: cohort {}", cohort.cohort_id);
    std::vector<SlidePrediction> preds =
        aggregate_tile_scores(tile_scores[cohort.cohort_id], slide_boot, config.workers);
    const auto labels = label_index(cohort.entries, config.in_situ_as_melanoma);
    std::vector<SlidePrediction> kept;
    for (SlidePrediction& p : preds) {
      const auto it = labels.find(p.slide_id);
      if (it == labels.end()) continue;
      p.label = it->second;
      p.stain = p.model_id == config.he_scorer().model_id ? Stain::HE : Stain::MelanA;
      kept.push_back(std::move(p));
    }
    for (const ManifestEntry& e : cohort.entries) {
      for (const ScorerSpec& spec : config.scorers) {
        const bool found = std::any_of(kept.begin(), kept.end(), [&](const SlidePrediction& p) {
          return p.slide_id == e.slide_id && p.model_id == spec.model_id;
        });
        if (!found) throw StageError("aggregate", e.slide_id, "no tile scores for " + spec.model_id);
      }
    }

    summary.uncertain_slides[cohort.cohort_id] = fuse_cohort(config, training.fusion, he_threshold, kept);
    write_slide_predictions(pred_dir / (cohort.cohort_id + ".csv"), kept);

    spdlog::info("evaluate: cohort {}", cohort.cohort_id);
    auto results = evaluate_predictions(config, cohort.cohort_id, kept);
    summary.results.insert(summary.results.end(), results.begin(), results.end());
    summary.predictions[cohort.cohort_id] = std::move(kept);
  }

  summary.table = render_report_table(summary.results, summary.rows, summary.cohorts);

  // Every fused product under every mode, for comparison.
  std::vector<ReportRowSpec> mode_rows;
  for (FusionMode mode : kAllFusionModes) {
    for (std::string_view product : {kProductMelanA, kProductMultimodal, kProductHierarchical}) {
      mode_rows.push_back({fused_model_id(mode, product), fused_model_id(mode, product)});
    }
  }
  const std::string modes_table = render_report_table(summary.results, mode_rows, summary.cohorts);

  {
    std::ofstream csv(config.output_root / "report.csv", std::ios::binary);
    write_report_csv(csv, summary.results);
    std::ofstream roc(config.output_root / "roc_points.csv", std::ios::binary);
    write_roc_points_csv(roc, summary.results);
  }
  write_text(config.output_root / "report.txt",
             summary.table + "\nFusion modes\n\n" + modes_table);

  json seeds = {{"root", config.seed}};
  for (const char* name : {"synthesis", "folds", "training", "jitter", "slide_bootstrap", "bootstrap"}) {
    seeds[name] = derive_seed(config.seed, name);
  }
  json uncertain = json::object();
  for (const auto& [cohort, slides] : summary.uncertain_slides) uncertain[cohort] = slides;
  const json run_manifest = {
      {"config_hash", config_hash(config)},
      {"seeds", seeds},
      {"cohorts", summary.cohorts},
      {"he_threshold", he_threshold},
      {"hierarchical_uncertain_slides", uncertain},
      {"external_scores", config.external_scores.has_value()},
      {"artifacts",
       {"report.csv", "report.txt", "roc_points.csv", "slide_predictions/", "tile_scores/",
        "models/", "validation/"}},
      {"config", json::parse(pipeline_config_to_json(config))},
  };
  json manifest_doc = run_manifest;
  manifest_doc["config"].erase("workers");
  write_text(config.output_root / "run_manifest.json", manifest_doc.dump(2) + "\n");
  spdlog::info("run: report written to {}", (config.output_root / "report.txt").string());
  return summary;
}

}  // namespace stainfuse
