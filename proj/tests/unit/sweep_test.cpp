#include <gtest/gtest.h>

#include "qlab/error.hpp"
#include "qlab/metrics_csv.hpp"
#include "qlab/sweep.hpp"
#include "test_support.hpp"

namespace qlab::sweep {
namespace {

namespace fs = std::filesystem;
using testing::ScratchDir;

// Base keys that shrink the tiny profile to the micro test size.
std::string micro_base() {
  std::string out;
  const config::Config micro = testing::micro_config(10);
  for (const auto& [k, v] : micro.values()) {
    if (config::Config::tiny().get(k) != v) out += "base." + k + " = " + v + "\n";
  }
  return out;
}

TEST(Plan, ParsesAxesSeedsAndBase) {
  const ExperimentPlan p = parse_plan(
      "profile = tiny\nseeds = 1, 2\naxis.optim.peak_lr = 3e-4, 1e-3, 3e-3\n"
      "branch.steps = 5, 10\nquant_eval = none\nbase.schedule.kind = constant\n");
  EXPECT_EQ(p.seeds, (std::vector<std::uint64_t>{1, 2}));
  ASSERT_EQ(p.axes.size(), 1u);
  EXPECT_EQ(p.axes[0].values.size(), 3u);
  EXPECT_EQ(p.branch_steps, (std::vector<std::uint64_t>{5, 10}));
  EXPECT_EQ(p.base.get("schedule.kind"), "constant");
  EXPECT_EQ(p.base.get("model.d_model"), "64");
}

TEST(Plan, ProblemsAreCollected) {
  try {
    parse_plan("seeds = x\naxis.nope.key = 1\nwhat = 3\nbase.model.n_heads = 5\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("plan:1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("nope.key"), std::string::npos) << msg;
    EXPECT_NE(msg.find("what"), std::string::npos) << msg;
  }
  // Cells that fail to resolve are rejected up front.
  EXPECT_THROW(parse_plan("axis.model.n_heads = 4, 5\n"), ConfigError);
}

TEST(Plan, EnumerationOrder) {
  const ExperimentPlan p = parse_plan("seeds = 7, 8\naxis.optim.peak_lr = 1e-3, 3e-3\naxis.optim.weight_decay = 0, 0.1\n");
  const auto cells = enumerate(p);
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_EQ(cells[0].assignment.at("optim.peak_lr"), "1e-3");
  EXPECT_EQ(cells[0].assignment.at("optim.weight_decay"), "0");
  EXPECT_EQ(cells[1].seed, 8u);
  EXPECT_EQ(cells[2].assignment.at("optim.weight_decay"), "0.1");
  EXPECT_EQ(cells[4].assignment.at("optim.peak_lr"), "3e-3");
  EXPECT_EQ(cells[7].config.get("model.init_seed"), "8");
  for (std::size_t i = 0; i < cells.size(); ++i) EXPECT_EQ(cells[i].index, i);
}

TEST(Sweep, TwoByTwoProducesFourRunsAndRows) {
  ScratchDir dir;
  const ExperimentPlan p = parse_plan("profile = tiny\n" + micro_base() +
                                      "seeds = 1, 2\naxis.optim.peak_lr = 1e-3, 3e-3\nquant_eval = final\n");
  const SweepOutcome out = cmd_sweep(p, dir.path());
  EXPECT_EQ(out.runs, 4u);
  EXPECT_EQ(out.failures, 0u);
  const csv::Table t = csv::read_table(out.summary);
  ASSERT_EQ(t.rows.size(), 4u);
  const std::size_t c_dir = t.column("run_dir"), c_id = t.column("run_id"), c_ce = t.column("val_ce_fp");
  const std::size_t c_q4 = t.column("val_ce_q4"), c_status = t.column("status");
  for (const auto& r : t.rows) {
    EXPECT_EQ(r[c_status], "ok");
    EXPECT_TRUE(fs::exists(dir / r[c_dir] / "manifest.txt"));
    // Summary values equal the last row of the run's own CSV.
    const auto rows = csv::read_metrics(dir / r[c_dir] / "metrics.csv");
    const metrics::MetricRecord* tail = nullptr;
    for (const auto& m : rows) {
      if (m.run_id == r[c_id] && (!tail || m.step > tail->step)) tail = &m;
    }
    ASSERT_NE(tail, nullptr);
    EXPECT_EQ(r[c_ce], csv::format_real(*tail->val_ce_fp));
    EXPECT_EQ(r[c_q4], csv::format_real(tail->val_ce_q.at(4)));
  }
  // A second invocation resumes the finished cells and rewrites the same summary.
  EXPECT_EQ(cmd_sweep(p, dir.path()).failures, 0u);
  EXPECT_EQ(csv::read_table(out.summary).rows, t.rows);
}

TEST(Sweep, SingleCellMatchesTrain) {
  ScratchDir dir;
  const ExperimentPlan p = parse_plan("profile = tiny\n" + micro_base() + "seeds = 1\nquant_eval = none\n");
  cmd_sweep(p, dir / "sweep");
  const auto direct = harness::cmd_train(enumerate(p).at(0).config, dir / "direct", {});
  EXPECT_EQ(manifest::read_manifest(dir / "sweep" / "cell000").run_id, direct.run_id);
  EXPECT_EQ(csv::read_metrics(dir / "sweep" / "cell000" / "metrics.csv").size(),
            csv::read_metrics(dir / "direct" / "metrics.csv").size());
}

TEST(Sweep, BranchesAndFailuresAreRecorded) {
  ScratchDir dir;
  const ExperimentPlan p = parse_plan("profile = tiny\n" + micro_base() +
                                      "seeds = 1\nbranch.steps = 5, 7\nquant_eval = none\n");
  const SweepOutcome out = cmd_sweep(p, dir.path());
  EXPECT_EQ(out.runs, 3u);
  EXPECT_EQ(out.failures, 1u);  // no checkpoint at step 7
  const csv::Table t = csv::read_table(out.summary);
  const std::size_t c_b = t.column("branch_step"), c_status = t.column("status");
  EXPECT_EQ(t.rows[1][c_b], "5");
  EXPECT_EQ(t.rows[1][c_status], "ok");
  EXPECT_NE(t.rows[2][c_status].find("failed"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "cell000_b5" / "manifest.txt"));
}

}  // namespace
}  // namespace qlab::sweep
