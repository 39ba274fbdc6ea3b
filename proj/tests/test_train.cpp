#include <filesystem>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "mtbackdoor/config.hpp"
#include "mtbackdoor/train.hpp"

using namespace mtb;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> shapes(int n, std::uint64_t seed, int K = 4) {
  DatasetSpec spec;
  spec.n_images = n;
  spec.seed = seed;
  spec.num_classes = K;
  return generate_dataset(spec);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 1;
  c.injection.patch_height = c.injection.patch_width = 8;
  c.seed = 3;
  return c;
}

GridDetectorConfig detector_config(int K = 4) {
  GridDetectorConfig d;
  d.num_classes = K;
  return d;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mtb_test_train_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(TrainJoint, NoPoisoningLeavesGeneratorUntouched) {
  const auto data = shapes(16, 1);
  auto cfg = quick_config();
  cfg.epochs = 2;
  cfg.sampler.poison_rate = 0.0;
  const auto det = build_detector(detector_config(), 1);
  const auto gen = build_generator(cfg, 4, {56, 56});
  const auto run = train_joint(data, det, gen, cfg);
  EXPECT_EQ(run.generator.params(), gen.params());
  EXPECT_NE(run.detector.params(), det.params());
  EXPECT_EQ(run.steps, 4);
}

TEST(TrainJoint, SinglePoisonedSlotMovesOnlyReachableGeneratorParameters) {
  // Untargeted generation has e_r = 0, so the removal weights receive no
  // gradient while the generation weights and both biases do.
  const auto data = shapes(8, 2);
  auto cfg = quick_config();
  cfg.sampler.poison_rate = 1.0 / 8.0;
  cfg.scenarios = {Scenario::UntargetedGeneration};
  const auto gen = build_generator(cfg, 4, {56, 56});
  const auto run = train_joint(data, build_detector(detector_config(), 2), gen, cfg);
  ASSERT_EQ(run.steps, 1);
  auto same = [](std::span<const double> a, std::span<const double> b) { return std::equal(a.begin(), a.end(), b.begin()); };
  EXPECT_TRUE(same(run.generator.weight(0), gen.weight(0)));
  EXPECT_FALSE(same(run.generator.weight(1), gen.weight(1)));
  EXPECT_FALSE(same(run.generator.bias(0), gen.bias(0)));
}

TEST(TrainJoint, ReplayIsDeterministic) {
  const auto data = shapes(24, 3);
  auto cfg = quick_config();
  cfg.epochs = 2;
  const auto a_dir = scratch_dir("replay_a"), b_dir = scratch_dir("replay_b");
  cfg.log_batch_plans = true;
  const auto a = train_joint(data, build_detector(detector_config(), 7), build_generator(cfg, 4, {56, 56}), cfg,
                             {a_dir, &data, {}});
  const auto b = train_joint(data, build_detector(detector_config(), 7), build_generator(cfg, 4, {56, 56}), cfg,
                             {b_dir, &data, {}});
  EXPECT_EQ(a.detector.params(), b.detector.params());
  EXPECT_EQ(a.generator.params(), b.generator.params());
  EXPECT_EQ(lines(a_dir / "metrics.jsonl"), lines(b_dir / "metrics.jsonl"));
  EXPECT_EQ(lines(a_dir / "batch_plans.jsonl"), lines(b_dir / "batch_plans.jsonl"));
  EXPECT_EQ(lines(a_dir / "metrics.jsonl").size(), 2u);
  EXPECT_EQ(lines(a_dir / "batch_plans.jsonl").size(), 6u);
}

TEST(TrainJoint, RunDirectoryRoundTrip) {
  const auto data = shapes(16, 4);
  auto cfg = quick_config();
  cfg.epochs = 2;
  cfg.checkpoint_every = 1;
  const auto dir = scratch_dir("layout");
  const auto run = train_joint(data, build_detector(detector_config(), 4), build_generator(cfg, 4, {56, 56}), cfg,
                               {dir, &data, {}});
  for (const char* f : {"target_pool.json", "metrics.jsonl", "checkpoints/detector.json", "checkpoints/generator.json",
                        "checkpoints/detector_epoch1.json", "checkpoints/generator_epoch1.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto back = load_run(dir);
  EXPECT_EQ(back.detector.params(), run.detector.params());
  EXPECT_EQ(back.generator.params(), run.generator.params());
  EXPECT_EQ(back.steps, run.steps);
  EXPECT_EQ(back.pool.size(), run.pool.size());
  EXPECT_EQ(back.injection.patch_height, 8);
  ASSERT_EQ(back.metrics.size(), 2u);
  EXPECT_EQ(back.metrics[1].mean_loss, run.metrics[1].mean_loss);
  EXPECT_EQ(back.metrics[1].probe_map_50, run.metrics[1].probe_map_50);
}

TEST(TrainJoint, DivergenceGuard) {
  auto data = shapes(8, 5);
  data[3].image.pixels[10] = std::numeric_limits<double>::quiet_NaN();
  auto cfg = quick_config();
  cfg.sampler.poison_rate = 0.0;
  EXPECT_THROW(train_joint(data, build_detector(detector_config(), 5), build_generator(cfg, 4, {56, 56}), cfg),
               DivergenceError);
}

TEST(TrainJoint, RejectsInconsistentInputs) {
  const auto data = shapes(8, 6);
  const auto cfg = quick_config();
  EXPECT_THROW(train_joint(data, build_detector(detector_config(5), 6), build_generator(cfg, 4, {56, 56}), cfg),
               ConfigError);
  EXPECT_THROW(train_joint({data.begin(), data.begin() + 4}, build_detector(detector_config(), 6),
                           build_generator(cfg, 4, {56, 56}), cfg),
               ConfigError);
  auto empty_pool = cfg;
  empty_pool.scenarios.clear();
  EXPECT_THROW(empty_pool.validate(), ConfigError);
}

TEST(Ablations, ShapeTheGeneratorAndSampler) {
  auto cfg = quick_config();
  cfg.ablation.disable_mosaicking = true;
  const auto full = build_generator(cfg, 4, {56, 56});
  EXPECT_EQ(full.patch_height(), 56);
  EXPECT_EQ(full.patch_width(), 56);

  cfg = quick_config();
  cfg.ablation.disable_disentanglement = true;
  const auto flat = build_generator(cfg, 4, {56, 56});
  EXPECT_EQ(flat.mode(), GeneratorMode::Flat);
  EXPECT_EQ(flat.input_dim(), cfg.pool(4).size());

  cfg = quick_config();
  cfg.ablation.disable_strategic_batching = true;
  EXPECT_FALSE(cfg.effective_sampler().use_occurrence);
  EXPECT_FALSE(cfg.effective_sampler().use_coexistence);

  const auto data = shapes(8, 7);
  for (int flag = 0; flag < 3; ++flag) {
    auto c = quick_config();
    c.ablation.disable_disentanglement = flag == 0;
    c.ablation.disable_mosaicking = flag == 1;
    c.ablation.disable_strategic_batching = flag == 2;
    EXPECT_NO_THROW(train_joint(data, build_detector(detector_config(), 8), build_generator(c, 4, {56, 56}), c));
  }
}

TEST(TrainTransfer, FrozenGeneratorAndProvenance) {
  const auto data = shapes(16, 8);
  auto cfg = quick_config();
  auto donor = build_generator(cfg, 4, {56, 56});
  const auto sum = donor.checksum();
  const auto dir = scratch_dir("transfer");
  const auto run = train_transfer(data, build_detector(detector_config(), 9), donor, cfg, "donor-run", {dir, nullptr, {}});
  EXPECT_EQ(run.generator.checksum(), sum);
  EXPECT_EQ(run.donor, "donor-run");
  EXPECT_EQ(read_json(dir / "donor.json").at("generator_checksum").get<std::uint64_t>(), sum);
  EXPECT_EQ(load_run(dir).donor, "donor-run");

  const auto five = shapes(16, 9, 5);
  EXPECT_THROW(train_transfer(five, build_detector(detector_config(5), 9), donor, cfg, "donor-run"), ConfigError);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c;
  c.epochs = 7;
  c.detector_optimizer.learning_rate = 0.03;
  c.generator_optimizer.beta1 = 0.4;
  c.sampler.poison_rate = 0.25;
  c.injection.centered_sigmoid = true;
  c.ablation.disable_mosaicking = true;
  c.scenarios = {Scenario::TargetedMiscls, Scenario::UntargetedRemoval};
  c.accounting = PairAccounting::ExcludeLastSource;
  c.seed = 42;
  c.log_batch_plans = true;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.pool(5).size(), c.pool(5).size());
}

TEST(RunConfigJson, RoundTripAndErrors) {
  RunConfig c = RunConfig::defaults();
  c.train.epochs = 3;
  c.eval.tau = 0.4;
  c.seed = 11;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"format": "something-else"})")), ConfigError);
  auto bad = c;
  bad.train.sampler.poison_rate = 2;
  EXPECT_THROW(bad.validate(), ConfigError);
}
