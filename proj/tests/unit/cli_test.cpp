#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("rareloss_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Small enough to train in a second or two per member.
  json base_config() const {
    return {
        {"dataset", {{"synth", {{"m", 1500}, {"seed", 3}}}}},
        {"model", {{"pre_dense", json::array()}, {"recurrent_units", 4}, {"post_dense", json::array()}}},
        {"history_len", 10},
        {"losses", {"mse"}},
        {"lead_times", {2}},
        {"ensemble_size", 2},
        {"train", {{"max_epochs", 2}, {"batch_size", 64}}},
        {"metrics", {{"omega_grid", {0.05, 0.1}}, {"eps_points", 5}}},
        {"output_dir", (dir_ / "run").string()},
    };
  }

  fs::path write_config(const json& j, const std::string& name = "config.json") const {
    const auto p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  int run(const std::string& args) const {
    const std::string cmd = std::string(RARELOSS_CLI) + " " + args + " > " +
                            (dir_ / "stdout.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  int stage(const std::string& name, const fs::path& cfg, const std::string& extra = "") const {
    const bool parallel = name == "train" || name == "evaluate";
    return run(name + " -c " + cfg.string() + (parallel ? " -j 1 " : " ") + extra);
  }

  fs::path run_dir() const { return dir_ / "run"; }
  fs::path dir_;
};

TEST_F(CliTest, ConfigErrorsExitTwo) {
  auto bad = base_config();
  bad["no_such_key"] = 1;
  EXPECT_EQ(stage("synth", write_config(bad)), 2);
  EXPECT_EQ(stage("synth", dir_ / "missing.json"), 2);
  std::ofstream(dir_ / "broken.json") << "{not json";
  EXPECT_EQ(stage("synth", dir_ / "broken.json"), 2);
  auto neg = base_config();
  neg["losses"] = {"bogus"};
  EXPECT_EQ(stage("train", write_config(neg)), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(CliTest, DegenerateTargetExitsThree) {
  {
    std::ofstream csv(dir_ / "flat.csv");
    csv << "t,x,y\n";
    for (int k = 0; k < 400; ++k) csv << k << "," << (k % 7) << ",1.5\n";
  }
  auto cfg = base_config();
  cfg["dataset"] = {{"csv", {{"path", "flat.csv"}, {"time_column", "t"}, {"target_column", "y"}}}};
  EXPECT_EQ(stage("fit-density", write_config(cfg)), 3);
}

TEST_F(CliTest, EnsembleResumeAndEvaluate) {
  const auto cfg = write_config(base_config());
  ASSERT_EQ(stage("synth", cfg), 0);
  ASSERT_EQ(stage("fit-density", cfg), 0);
  EXPECT_TRUE(fs::exists(run_dir() / "density" / "density.json"));
  EXPECT_TRUE(fs::exists(run_dir() / "density" / "normalization.json"));

  // Evaluating before training lists the missing members.
  EXPECT_EQ(stage("evaluate", cfg), 5);
  EXPECT_NE(slurp(dir_ / "stdout.txt").find("mse_tau2_seed1"), std::string::npos);

  ASSERT_EQ(stage("train", cfg), 0);
  const auto models = run_dir() / "models";
  for (int s : {1, 2}) {
    const std::string key = "mse_tau2_seed" + std::to_string(s);
    EXPECT_TRUE(fs::exists(models / (key + ".model.json")));
    EXPECT_TRUE(fs::exists(models / (key + ".log.csv")));
    EXPECT_TRUE(fs::exists(models / (key + ".manifest.json")));
  }

  const auto kept = models / "mse_tau2_seed2.model.json";
  const auto kept_time = fs::last_write_time(kept);
  const auto kept_text = slurp(kept);
  const auto first_text = slurp(models / "mse_tau2_seed1.model.json");
  fs::remove(models / "mse_tau2_seed1.model.json");
  ASSERT_EQ(stage("train", cfg, "--resume"), 0);
  EXPECT_EQ(fs::last_write_time(kept), kept_time);
  EXPECT_EQ(slurp(kept), kept_text);
  EXPECT_EQ(slurp(models / "mse_tau2_seed1.model.json"), first_text);

  ASSERT_EQ(stage("evaluate", cfg), 0);
  const auto metrics = run_dir() / "metrics";
  EXPECT_TRUE(fs::exists(metrics / "d_summary.csv"));
  const auto alpha = slurp(metrics / "mse_tau2_alpha.csv");
  EXPECT_EQ(alpha.rfind("omega,alpha_mean,alpha_p10,alpha_p90\n", 0), 0u);

  // A changed training setting invalidates the stored members.
  auto changed = base_config();
  changed["train"]["lr"] = 0.01;
  EXPECT_EQ(stage("train", write_config(changed, "changed.json"), "--resume"), 4);
}

TEST_F(CliTest, PerfectPredictorScoresPerfectly) {
  auto j = base_config();
  j["ensemble_size"] = 1;
  j["metrics"]["perfect_predictor"] = true;
  const auto cfg = write_config(j);
  ASSERT_EQ(stage("synth", cfg), 0);
  ASSERT_EQ(stage("fit-density", cfg), 0);
  ASSERT_EQ(stage("evaluate", cfg), 0);
  std::istringstream alpha(slurp(run_dir() / "metrics" / "mse_tau2_alpha.csv"));
  std::string line;
  std::getline(alpha, line);
  int rows = 0;
  while (std::getline(alpha, line)) {
    ++rows;
    EXPECT_NE(line.find(",1,1,1"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 2);
}

TEST_F(CliTest, RerunsAreByteIdentical) {
  auto j = base_config();
  j["ensemble_size"] = 1;
  std::string first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(run_dir());
    const auto cfg = write_config(j);
    ASSERT_EQ(stage("synth", cfg), 0);
    ASSERT_EQ(stage("fit-density", cfg), 0);
    ASSERT_EQ(stage("train", cfg), 0);
    ASSERT_EQ(stage("evaluate", cfg), 0);
    const std::string text = slurp(run_dir() / "models" / "mse_tau2_seed1.model.json") +
                             slurp(run_dir() / "metrics" / "mse_tau2_alpha.csv") +
                             slurp(run_dir() / "metrics" / "d_summary.csv") +
                             slurp(run_dir() / "density" / "density.json");
    if (pass == 0) {
      first = text;
    } else {
      EXPECT_EQ(text, first);
    }
  }
}

}  // namespace
