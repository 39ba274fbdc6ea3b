#include <gtest/gtest.h>

#include "mtbackdoor/defense.hpp"
#include "support.hpp"

using namespace mtb;

namespace {

double linf(const Image& a, const Image& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

std::vector<Sample> shapes(int n, std::uint64_t seed) {
  DatasetSpec spec;
  spec.n_images = n;
  spec.seed = seed;
  return generate_dataset(spec);
}

GridDetector trained_ish_detector(std::uint64_t seed) {
  GridDetector d(GridDetectorConfig{});
  Rng rng(seed);
  d.initialize(rng);
  for (double& p : d.params()) p += 0.02 * rng.normal();
  return d;
}

}  // namespace

TEST(InputDefense, MedianOfConstantImageIsUnchanged) {
  const Image x(9, 7, 0.37);
  EXPECT_EQ(median_filter(x, 3), x);
  EXPECT_EQ(median_filter(x, 5), x);
}

TEST(InputDefense, MeanFilterSpreadsOneHotPixel) {
  Image x(7, 7, 0.0);
  for (int c = 0; c < 3; ++c) x.at(3, 3, c) = 1.0;
  const Image y = mean_filter(x, 3);
  for (int r = 0; r < 7; ++r)
    for (int col = 0; col < 7; ++col) {
      const bool inside = std::abs(r - 3) <= 1 && std::abs(col - 3) <= 1;
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(y.at(r, col, c), inside ? 1.0 / 9.0 : 0.0, 1e-15);
    }
}

TEST(InputDefense, EdgeReplication) {
  Image x(3, 1, 0.0);
  for (int c = 0; c < 3; ++c) x.at(0, 0, c) = 0.9;
  // Window at (0,0) sees columns {0,0,1} in each of three replicated rows.
  EXPECT_NEAR(mean_filter(x, 3).at(0, 0, 0), 0.6, 1e-15);
}

TEST(InputDefense, MedianIdempotentOnPiecewiseConstant) {
  // Separated rectangles at least four pixels on a side, one per 8x8 cell.
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Image x(24, 24, rng.uniform());
    for (int cy = 0; cy < 3; ++cy)
      for (int cx = 0; cx < 3; ++cx) {
        const int w = rng.between(4, 6), h = rng.between(4, 6);
        const int x0 = 8 * cx + rng.between(1, 7 - w), y0 = 8 * cy + rng.between(1, 7 - h);
        const double v = rng.uniform();
        for (int y = y0; y < y0 + h; ++y)
          for (int xx = x0; xx < x0 + w; ++xx)
            for (int c = 0; c < 3; ++c) x.at(y, xx, c) = v;
      }
    const Image once = median_filter(x, 3);
    EXPECT_TRUE(median_filter(once, 3) == once) << "trial " << trial;
  }
}

TEST(InputDefense, JpegDistortionGrowsAsQualityDrops) {
  const auto img = shapes(1, 8)[0].image;
  const double high = linf(sanitize_input(img, JpegCompression{100}), img);
  const double low = linf(sanitize_input(img, JpegCompression{10}), img);
  EXPECT_GT(low, high);
  for (double v : sanitize_input(img, JpegCompression{10}).pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(InputDefense, RejectsModelKinds) {
  EXPECT_THROW(sanitize_input(Image(4, 4), Prune{0.5}), ConfigError);
  EXPECT_THROW(sanitize_input(Image(4, 4), MeanFilter{4}), ConfigError);
}

TEST(DefenseSpec, ParseAndDescribe) {
  EXPECT_EQ(describe(parse_defense("jpeg:75")), "jpeg(q=75)");
  EXPECT_EQ(describe(parse_defense("prune:0.9")), "prune(0.9)");
  const auto fp = std::get<FinePrune>(parse_defense("fineprune:0.5:3:0.2"));
  EXPECT_EQ(fp.fraction, 0.5);
  EXPECT_EQ(fp.epochs, 3);
  EXPECT_EQ(fp.clean_fraction, 0.2);
  const auto ft = std::get<FineTune>(parse_defense("finetune:2"));
  EXPECT_EQ(ft.epochs, 2);
  EXPECT_EQ(ft.clean_fraction, 0.1);
  for (const char* bad : {"", "jpeg", "jpeg:0", "jpeg:101", "mean:2", "median:x", "prune:1", "prune:0", "neo:1",
                          "jpeg:75:1"})
    EXPECT_THROW(parse_defense(bad), ConfigError) << bad;
  EXPECT_EQ(standard_defenses().size(), 6u);
}

TEST(ModelDefense, TinyPruneFractionLeavesOutputsUnchanged) {
  const auto d = trained_ish_detector(1);
  const auto data = shapes(10, 2);
  // Any fraction below 1/C rounds down to zero channels.
  const auto pruned = sanitize_model(d, data, Prune{0.5 / double(d.feature_channels())});
  for (const auto& s : data) EXPECT_EQ(pruned.forward(s.image).values, d.forward(s.image).values);
}

TEST(ModelDefense, PruneRemovesLeastActiveChannels) {
  auto d = trained_ish_detector(4);
  const auto data = shapes(10, 5);
  const auto activity = channel_activity(d, data);
  auto copy = d;
  const auto pruned = prune_dormant(copy, data, 0.5);
  ASSERT_EQ(pruned.size(), activity.size() / 2);
  double max_pruned = 0, min_kept = 1e300;
  for (std::size_t c = 0; c < activity.size(); ++c) {
    if (copy.channel_mask()[c]) min_kept = std::min(min_kept, activity[c]);
    else max_pruned = std::max(max_pruned, activity[c]);
  }
  EXPECT_LE(max_pruned, min_kept);
  for (double a : channel_activity(copy, data)) EXPECT_GE(a, 0.0);
}

TEST(ModelDefense, FinePruneIsFineTuneAfterPrune) {
  const auto d = trained_ish_detector(6);
  const auto data = shapes(40, 7);
  const auto composed = sanitize_model(sanitize_model(d, data, Prune{0.5}), data, FineTune{1, 0.25});
  const auto direct = sanitize_model(d, data, FinePrune{0.5, 1, 0.25});
  EXPECT_EQ(direct.params(), composed.params());
  EXPECT_EQ(direct.channel_mask(), composed.channel_mask());
  int pruned = 0;
  for (char m : direct.channel_mask()) pruned += !m;
  EXPECT_EQ(pruned, int(d.feature_channels()) / 2);
}

TEST(ModelDefense, OperatesOnCopies) {
  const auto d = trained_ish_detector(9);
  const auto before = d.params();
  const auto data = shapes(20, 10);
  (void)sanitize_model(d, data, FinePrune{0.9, 1, 0.5});
  EXPECT_EQ(d.params(), before);
  for (char m : d.channel_mask()) EXPECT_TRUE(m);
  EXPECT_THROW(sanitize_model(d, {}, Prune{0.5}), ConfigError);
  EXPECT_THROW(sanitize_model(d, data, MeanFilter{3}), ConfigError);
}

TEST(EvaluateDefense, OneRowPerSpecPlusBaseline) {
  RunArtifacts run;
  run.detector = trained_ish_detector(11);
  run.generator = TriggerGenerator::disentangled(4, 8, 8);
  Rng rng(12);
  run.generator.initialize(rng);
  run.injection.patch_height = run.injection.patch_width = 8;
  const auto generator_sum = run.generator.checksum();
  const auto detector_params = run.detector.params();

  const auto eval = shapes(6, 13);
  const auto clean = shapes(30, 14);
  EvalOptions eo;
  eo.tau = 0.05;
  const auto report = evaluate_defense(run, standard_defenses(), eval, clean, eo);
  ASSERT_EQ(report.rows.size(), 7u);
  EXPECT_EQ(report.rows[0].first, "none");
  for (std::size_t i = 0; i < standard_defenses().size(); ++i)
    EXPECT_EQ(report.rows[i + 1].first, describe(standard_defenses()[i]));
  EXPECT_EQ(run.generator.checksum(), generator_sum);
  EXPECT_EQ(run.detector.params(), detector_params);
  const auto j = to_json(report);
  EXPECT_EQ(j["rows"].size(), 7u);
  EXPECT_NE(render_table(report).find("prune(0.9)"), std::string::npos);
}

TEST(EvaluateDefense, NearIdentityJpegTracksBaseline) {
  RunArtifacts run;
  run.detector = trained_ish_detector(21);
  run.generator = TriggerGenerator::disentangled(4, 8, 8);
  run.injection.patch_height = run.injection.patch_width = 8;
  const auto eval = shapes(8, 22);
  EvalOptions eo;
  eo.scenarios = {Scenario::UntargetedRemoval};
  eo.tau = 0.05;
  const auto report = evaluate_defense(run, {JpegCompression{100}}, eval, {}, eo);
  ASSERT_TRUE(report.rows[0].second.clean_map && report.rows[1].second.clean_map);
  EXPECT_NEAR(report.rows[1].second.clean_map->map_50_95, report.rows[0].second.clean_map->map_50_95, 0.05);
}
