// Drives the mtbackdoor binary end to end on a tiny dataset.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "mtb_test_cli"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    ASSERT_EQ(run("dataset --out " + (root() / "train").string() + " --k 3 --n 24 --seed 5"), 0);
    ASSERT_EQ(run("dataset --out " + (root() / "val").string() + " --k 3 --n 8 --seed 6"), 0);
    ASSERT_EQ(run(train_args("base") + " --log-plans"), 0);
  }

  static std::string train_args(const std::string& name) {
    return "train -q --run " + name + " --data " + (root() / "train").string() + " --validation " +
           (root() / "val").string() + " --epochs 1 --channels 4,8,8,8";
  }

  /// Exit status of `mtbackdoor args`, with stdout/stderr captured to last_output().
  static int run(const std::string& args) {
    const std::string cmd = "cd " + root().string() + " && MTB_RUN_ROOT=runs " MTB_CLI_PATH " " + args + " > " +
                            (root() / "out.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string last_output() { return slurp(root() / "out.txt"); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static nlohmann::json json_at(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

  static fs::path run_dir(const std::string& name) { return root() / "runs" / name; }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("dataset"), 1);
  EXPECT_EQ(run("dataset --out x --k 0"), 1);
  EXPECT_EQ(run("dataset --out x --imbalance 1.5"), 1);
  EXPECT_EQ(run("train --epochs -1"), 1);
  EXPECT_EQ(run("eval no_such_run"), 1);
  EXPECT_EQ(run("defense base"), 1);
  EXPECT_NE(last_output().find("--spec"), std::string::npos);
  EXPECT_EQ(run("defense base --spec jpeg:500"), 1);
  EXPECT_EQ(run("render base --sample no_such_sample"), 1);
  EXPECT_EQ(run("render base --sample x --source 1 --dest 1"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, RuntimeFailuresExitTwo) {
  fs::create_directories(run_dir("broken/checkpoints"));
  fs::copy_file(run_dir("base") / "config.json", run_dir("broken") / "config.json",
                fs::copy_options::overwrite_existing);
  std::ofstream(run_dir("broken/checkpoints/detector.json")) << "{ not json";
  EXPECT_EQ(run("eval broken"), 2);
}

TEST_F(Cli, DatasetIsDeterministic) {
  ASSERT_EQ(run("dataset --out again --k 3 --n 24 --seed 5"), 0);
  EXPECT_EQ(slurp(root() / "again/annotations.json"), slurp(root() / "train/annotations.json"));
  EXPECT_EQ(slurp(root() / "again/images/img_00007.png"), slurp(root() / "train/images/img_00007.png"));
  for (const char* f : {"stats.json", "dataset_spec.json"}) EXPECT_TRUE(fs::exists(root() / "again" / f)) << f;
  EXPECT_EQ(json_at(root() / "again/annotations.json")["categories"].size(), 3u);
}

TEST_F(Cli, TrainWritesRunDirectory) {
  for (const char* f : {"config.json", "metrics.jsonl", "batch_plans.jsonl", "target_pool.json",
                        "checkpoints/detector.json", "checkpoints/generator.json"})
    EXPECT_TRUE(fs::exists(run_dir("base") / f)) << f;
  const auto config = json_at(run_dir("base") / "config.json");
  EXPECT_EQ(config["train"]["epochs"], 1);
  EXPECT_EQ(json_at(run_dir("base") / "target_pool.json")["targets"].size(), 12u);
}

TEST_F(Cli, ReplayFromConfigSnapshot) {
  ASSERT_EQ(run("train -q --run replay --config " + (run_dir("base") / "config.json").string()), 0);
  EXPECT_EQ(slurp(run_dir("replay") / "metrics.jsonl"), slurp(run_dir("base") / "metrics.jsonl"));
  EXPECT_EQ(slurp(run_dir("replay") / "checkpoints/generator.json"),
            slurp(run_dir("base") / "checkpoints/generator.json"));
}

TEST_F(Cli, EvalReportsEveryScenario) {
  ASSERT_EQ(run("eval base --dump"), 0);
  EXPECT_NE(last_output().find("Rem.Untar"), std::string::npos);
  const auto report = json_at(run_dir("base") / "eval_report.json");
  EXPECT_EQ(report["scenarios"].size(), 5u);
  EXPECT_EQ(report["images"], 8);
  EXPECT_TRUE(report.contains("clean_map"));
  EXPECT_TRUE(json_at(run_dir("base") / "results_clean.json").is_array());

  ASSERT_EQ(run("eval base --scenario untargeted_removal --no-map --tau 0.5 --out " + (root() / "ur.json").string()), 0);
  const auto ur = json_at(root() / "ur.json");
  EXPECT_EQ(ur["scenarios"].size(), 1u);
  EXPECT_EQ(ur["tau"], 0.5);
}

TEST_F(Cli, DefenseOneRowPerSpecPlusBaseline) {
  ASSERT_EQ(run("defense base --spec jpeg:75 --spec median:3"), 0);
  const auto rep = json_at(run_dir("base") / "defense_report.json");
  ASSERT_EQ(rep["rows"].size(), 3u);
  EXPECT_NE(last_output().find("median(k=3)"), std::string::npos);
}

TEST_F(Cli, RenderWritesStripsAndTriggers) {
  ASSERT_EQ(run("render base --sample img_00000 --sample img_00003 --scale 2"), 0);
  const auto dir = run_dir("base") / "render";
  for (const char* f : {"img_00000.png", "img_00003.png", "training_curves.png", "trigger_untargeted_removal.png",
                        "trigger_targeted_miscls_0_1.png"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST_F(Cli, TransferKeepsDonorGenerator) {
  ASSERT_EQ(run("transfer base -q --run moved --data " + (root() / "train").string() + " --validation " +
                (root() / "val").string() + " --epochs 1 --channels 4,8,8,8"),
            0);
  auto moved = json_at(run_dir("moved") / "checkpoints/generator.json");
  EXPECT_EQ(moved["donor"], fs::absolute(run_dir("base")).lexically_normal().string());
  moved.erase("donor");
  EXPECT_EQ(moved, json_at(run_dir("base") / "checkpoints/generator.json"));
  EXPECT_TRUE(json_at(run_dir("moved") / "donor.json").contains("generator_checksum"));
}
