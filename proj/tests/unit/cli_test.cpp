#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "qlab/metrics_csv.hpp"
#include "test_support.hpp"

namespace qlab {
namespace {

namespace fs = std::filesystem;
using testing::ScratchDir;

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + QLAB_CLI_PATH + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::ofstream(dir_ / "micro.cfg") << testing::micro_config(10).to_text();
  }
  int qlab(const std::string& args) { return run_cli(args, dir_ / "log.txt"); }
  std::string log() const { return slurp(dir_ / "log.txt"); }
  std::string cfg() const { return "--config \"" + (dir_ / "micro.cfg").string() + "\""; }
  std::string path(const std::string& leaf) const { return "\"" + (dir_ / leaf).string() + "\""; }

  ScratchDir dir_;
};

TEST_F(CliTest, ConfigProblemsExitWithTwo) {
  EXPECT_EQ(qlab("train " + cfg() + " --set model.bogus=1 --out " + path("r")), 2) << log();
  EXPECT_NE(log().find("model.bogus"), std::string::npos);
  EXPECT_EQ(qlab("train " + cfg() + " --set model.n_heads=3 --out " + path("r")), 2) << log();
  EXPECT_EQ(qlab("train --config " + path("missing.cfg") + " --out " + path("r")), 2) << log();
  EXPECT_EQ(qlab("train --no-such-flag"), 2) << log();
  EXPECT_EQ(qlab("frobnicate"), 2) << log();
  EXPECT_FALSE(fs::exists(dir_ / "r"));
}

TEST_F(CliTest, TrainAverageEvalReport) {
  ASSERT_EQ(qlab("train " + cfg() + " --out " + path("run")), 0) << log();
  EXPECT_NE(log().find("step 10"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "ckpt_10.qlab"));

  ASSERT_EQ(qlab("average --run " + path("run") + " --k 2 --interval 5"), 0) << log();
  EXPECT_TRUE(fs::exists(dir_ / "run" / "lawa_10.qlab"));

  ASSERT_EQ(qlab("eval --run " + path("run") + " --steps 10 --bits 3,4"), 0) << log();
  EXPECT_NE(log().find("rows 1"), std::string::npos) << log();

  ASSERT_EQ(qlab("quantize --ckpt " + path("run/ckpt_10.qlab") + " --bits 3 --method rtn --out " +
                 path("q3.qlab")),
            0)
      << log();
  ASSERT_EQ(qlab("eval --ckpt " + path("q3.qlab") + " " + cfg()), 0) << log();
  EXPECT_NE(log().find("val_ce "), std::string::npos);

  ASSERT_EQ(qlab("soup --ckpt " + path("run/ckpt_5.qlab") + ":0.5 " + path("run/ckpt_10.qlab") +
                 ":0.5 --out " + path("soup.qlab")),
            0)
      << log();
  EXPECT_TRUE(fs::exists(dir_ / "soup.qlab"));

  ASSERT_EQ(qlab("report --run " + path("run") + " --metric val_ce_fp --out " + path("panel")), 0) << log();
  EXPECT_TRUE(fs::exists(dir_ / "panel.svg"));

  ASSERT_EQ(qlab("branch --parent " + path("run") + " --step 5 --decay-frac 0.4 --out " + path("child")), 0)
      << log();
  EXPECT_NE(log().find("step 7"), std::string::npos) << log();
  // Branches inherit the parent configuration.
  EXPECT_EQ(qlab("branch --parent " + path("run") + " --step 5 --set optim.peak_lr=1 --out " + path("c2")), 2);
}

TEST_F(CliTest, PartialSweepFailureExitsWithFour) {
  std::string plan = "profile = tiny\nseeds = 1\nquant_eval = none\nbranch.steps = 5, 7\n";
  const config::Config micro = testing::micro_config(10);
  for (const auto& [k, v] : micro.values()) plan += "base." + k + " = " + v + "\n";
  std::ofstream(dir_ / "plan.txt") << plan;
  EXPECT_EQ(qlab("sweep --plan " + path("plan.txt") + " --out " + path("sweep")), 4) << log();
  EXPECT_TRUE(fs::exists(dir_ / "sweep" / "summary.csv"));
}

TEST_F(CliTest, DivergenceExitsWithThree) {
  EXPECT_EQ(qlab("train " + cfg() + " --set optim.peak_lr=1e30 --out " + path("boom")), 3)
      << log();
}

}  // namespace
}  // namespace qlab
