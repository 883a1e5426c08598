#pragma once

// Experiment plans: the cross product of sweep axes and seeds over a shared base
// configuration, optionally with cooldown branches off every trunk.
//
// Plan file (same line syntax as run configs):
//   profile = tiny                       # or desk (default)
//   seeds = 1, 2, 3
//   seed_key = model.init_seed           # key each seed is written to
//   axis.optim.peak_lr = 3e-4, 1e-3, 3e-3
//   branch.steps = 1000, 2000            # optional
//   branch.decay_frac = 0.1
//   quant_eval = final                   # final | all | none
//   base.schedule.kind = constant        # any run-config key

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qlab/config.hpp"
#include "qlab/runner.hpp"

namespace qlab::sweep {

struct Axis {
  std::string key;
  std::vector<std::string> values;
};

struct ExperimentPlan {
  config::Config base;
  std::vector<Axis> axes;
  std::vector<std::uint64_t> seeds{0};
  std::string seed_key = "model.init_seed";
  std::vector<std::uint64_t> branch_steps;
  double branch_decay_frac = 0.1;
  std::string quant_eval = "final";
};

/// One trunk run of the plan.
struct Cell {
  std::size_t index = 0;
  std::map<std::string, std::string> assignment;  // axis key → value
  std::uint64_t seed = 0;
  config::Config config;
};

/// Parses a plan. `overrides` (section.key=value) apply to the base config.
ExperimentPlan parse_plan(const std::string& text, const std::vector<std::string>& overrides = {});
ExperimentPlan load_plan(const std::filesystem::path& path,
                         const std::vector<std::string>& overrides = {});

/// Cross product in row-major order (first axis slowest, seeds fastest).
std::vector<Cell> enumerate(const ExperimentPlan& plan);

struct SweepOutcome {
  std::size_t runs = 0;
  std::size_t failures = 0;
  std::filesystem::path summary;
};

/// Trains every cell (resuming existing ones), branches, runs the selected
/// quantize-eval passes and writes summary.csv keyed by (axis values, seed, branch_step).
/// Cell failures are recorded in the summary and the remaining cells proceed.
SweepOutcome cmd_sweep(const ExperimentPlan& plan, const std::filesystem::path& out_dir,
                       const harness::LogSink& log = {});

}  // namespace qlab::sweep
