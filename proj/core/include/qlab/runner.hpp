#pragma once

// Run directories: training, cooldown branches, checkpoint quantization sweeps,
// averaging and soups.
//
// A run directory holds
//   manifest.txt                 resolved configuration and lineage
//   metrics.csv                  evaluation rows keyed by (run_id, step)
//   norms.csv                    per-step lr, loss and norms
//   ckpt_<step>.qlab             weights
//   ckpt_<step>.opt.qlab         optimizer moments and data cursor
//   lawa_<step>.qlab             latest-weight averages (from `average`)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qlab/config.hpp"
#include "qlab/data.hpp"
#include "qlab/manifest.hpp"
#include "qlab/metrics.hpp"
#include "qlab/model.hpp"
#include "qlab/quant.hpp"

namespace qlab::harness {

using LogSink = std::function<void(const std::string&)>;

/// Data derived from a run's configuration; a pure function of (corpus bytes, settings).
struct RunData {
  data::Splits splits;
  std::vector<data::Batch> eval;
  data::CalibrationSet calib;
  std::uint64_t corpus_hash = 0;
  std::uint64_t eval_hash = 0;
};

RunData prepare_data(const config::RunSettings& s);

/// Parallelism cap from QLAB_THREADS (default: hardware concurrency, at least 1).
std::size_t thread_budget();

struct TrainOptions {
  bool force = false;    // discard an existing run directory
  bool resume = false;   // continue from the latest checkpoint with optimizer state
  std::optional<std::uint64_t> max_steps;  // stop (with a checkpoint) at this step
  LogSink log;
};

struct TrainOutcome {
  std::string run_id;
  std::uint64_t final_step = 0;
  bool complete = false;  // reached the schedule end
};

/// Trains a trunk run. Throws ConfigError before any compute on invalid settings,
/// RunStateError when the directory exists and neither resume nor force is set.
TrainOutcome cmd_train(const config::Config& cfg, const std::filesystem::path& run_dir,
                       const TrainOptions& opts);

/// Linear cooldown from the parent's η(branch_step) to zero over
/// round(decay_frac·branch_step) steps, starting from the parent's checkpoint.
TrainOutcome cmd_branch(const std::filesystem::path& parent_dir, std::uint64_t branch_step,
                        double decay_frac, const std::filesystem::path& run_dir,
                        const TrainOptions& opts);

/// Schedule a run follows (including the cooldown graft of branch runs).
optim::ScheduleSpec run_schedule(const config::RunSettings& s,
                                 const std::optional<manifest::ParentRef>& parent);

/// Steps at which training writes a checkpoint.
std::set<std::uint64_t> checkpoint_steps(const config::RunSettings& s,
                                         const optim::ScheduleSpec& schedule,
                                         std::uint64_t first_step);

struct CheckpointFilter {
  std::string kind = "ckpt";                 // "ckpt" or "lawa"
  std::optional<std::set<std::uint64_t>> steps;
  std::optional<std::uint64_t> every;
  bool matches(std::uint64_t step) const;
};

/// (step, path) of the checkpoints of one kind in a run directory, ascending.
std::vector<std::pair<std::uint64_t, std::filesystem::path>> list_checkpoints(
    const std::filesystem::path& run_dir, const std::string& kind = "ckpt");

struct QuantEvalOptions {
  std::vector<unsigned> bits;              // empty: the run's quant.bits
  std::optional<quant::Method> method;     // empty: the run's quant.method
  CheckpointFilter filter;
  std::vector<std::string> overrides;      // extra --set assignments (quant.* only)
  LogSink log;
};

struct QuantEvalOutcome {
  std::size_t rows = 0;
  std::size_t failures = 0;
};

/// Quantizes and evaluates each selected checkpoint and merges full rows into
/// metrics.csv. Failures are logged and counted; the remaining jobs proceed.
QuantEvalOutcome cmd_quantize_eval(const std::filesystem::path& run_dir,
                                   const QuantEvalOptions& opts);

/// Row key for quantize-eval results: the run id, suffixed with "+lawa" for
/// averaged checkpoints and "+<method>" for methods other than GPTQ.
std::string row_run_id(const std::string& run_id, const std::string& kind, quant::Method method);

/// Writes lawa_<s>.qlab for every stored checkpoint step s that is a multiple of
/// `interval` and has k−1 predecessors at the same spacing. Returns the written steps.
std::vector<std::uint64_t> cmd_average(const std::filesystem::path& run_dir, std::size_t k,
                                       std::uint64_t interval, const LogSink& log = {});

/// "path:weight" entries.
model::Checkpoint cmd_soup(const std::vector<std::string>& entries, const std::filesystem::path& out);

/// Runs fn(0..n−1) on up to `threads` worker threads. fn must not throw.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Evaluates a checkpoint or quantized model file.
metrics::EvalResult cmd_eval(const std::filesystem::path& model_file, const RunData& data);

}  // namespace qlab::harness
