#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "stainfuse/aggregation.hpp"
#include "stainfuse/evaluation.hpp"
#include "stainfuse/features.hpp"
#include "stainfuse/fusion.hpp"
#include "stainfuse/random.hpp"
#include "stainfuse/synth.hpp"
#include "stainfuse/tessellation.hpp"

using namespace stainfuse;

namespace {

CohortPredictions make_cohort(int n) {
  Engine engine = make_engine(1);
  CohortPredictions c;
  c.cohort_id = "bench";
  for (int i = 0; i < n; ++i) {
    c.entries.push_back({"s" + std::to_string(i), uniform01(engine),
                         i % 2 ? BinaryLabel::Melanoma : BinaryLabel::Nevus});
  }
  return c;
}

void BM_Auroc(benchmark::State& state) {
  const CohortPredictions c = make_cohort(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(auroc(c));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Auroc)->RangeMultiplier(4)->Range(40, 40960)->Complexity(benchmark::oNLogN);

void BM_AurocCi(benchmark::State& state) {
  const CohortPredictions c = make_cohort(40);
  const BootstrapConfig cfg{static_cast<int>(state.range(0)), 0.05, 7};
  for (auto _ : state) benchmark::DoNotOptimize(auroc_ci(c, cfg));
}
BENCHMARK(BM_AurocCi)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_SlideScoreCi(benchmark::State& state) {
  Engine engine = make_engine(2);
  std::vector<double> scores(static_cast<std::size_t>(state.range(0)));
  for (double& s : scores) s = uniform01(engine);
  const BootstrapConfig cfg{10000, 0.05, 3};
  for (auto _ : state) benchmark::DoNotOptimize(slide_score_ci(scores, cfg));
}
BENCHMARK(BM_SlideScoreCi)->Arg(16)->Arg(100)->Arg(598)->Unit(benchmark::kMillisecond);

void BM_Tessellate(benchmark::State& state) {
  const SynthConfig cfg = default_synth_config();
  const GeneratedSlide slide =
      generate_slide(SlideLabel::Melanoma, cfg.sites[0].profile, Stain::HE, cfg, 11);
  const MagLevel level = kAllMagLevels[static_cast<std::size_t>(state.range(0))];
  const SlideImage image = level == MagLevel::X40 ? slide.image : downscale(slide.image, level);
  for (auto _ : state) benchmark::DoNotOptimize(tessellate(image, slide.mask, level));
  state.SetLabel(std::string(to_string(level)));
}
BENCHMARK(BM_Tessellate)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

void BM_ExtractFeatures(benchmark::State& state) {
  Engine engine = make_engine(4);
  RgbImage tile(kTileEdgePx, kTileEdgePx);
  for (auto& v : tile.pixels) v = static_cast<std::uint8_t>(uniform01(engine) * 255);
  for (auto _ : state) benchmark::DoNotOptimize(extract_features(tile));
}
BENCHMARK(BM_ExtractFeatures)->Unit(benchmark::kMicrosecond);

void BM_Fuse(benchmark::State& state) {
  FusionConfig cfg;
  std::vector<SlidePrediction> preds;
  for (int i = 0; i < 5; ++i) {
    const std::string id = "m" + std::to_string(i);
    cfg.models.push_back({id, 0.3 + 0.1 * i, 0.8});
    SlidePrediction p;
    p.slide_id = "s";
    p.model_id = id;
    p.score = 0.15 * i + 0.1;
    preds.push_back(p);
  }
  cfg.normalize();
  for (auto _ : state) benchmark::DoNotOptimize(fuse(preds, cfg));
}
BENCHMARK(BM_Fuse);

void BM_GenerateSlide(benchmark::State& state) {
  SynthConfig cfg = default_synth_config();
  cfg.image_size = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        generate_slide(SlideLabel::Nevus, cfg.sites[1].profile, Stain::MelanA, cfg, ++seed));
  }
}
BENCHMARK(BM_GenerateSlide)->Arg(960)->Arg(1920)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
