// qlab: train, branch, quantize, evaluate, average and report on small language models.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "qlab/checkpoint_io.hpp"
#include "qlab/config.hpp"
#include "qlab/error.hpp"
#include "qlab/manifest.hpp"
#include "qlab/metrics_csv.hpp"
#include "qlab/report.hpp"
#include "qlab/runner.hpp"
#include "qlab/sweep.hpp"

namespace fs = std::filesystem;
using namespace qlab;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> sets;
  bool tiny = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "Configuration file (section.key = value lines)");
  cmd->add_option("--set", args.sets, "Override one key: section.key=value")->take_all();
  cmd->add_flag("--tiny", args.tiny, "Start from the small CI profile instead of the desk defaults");
}

config::Config build_config(const CommonArgs& args, std::optional<config::Config> base = std::nullopt) {
  config::Config cfg = base ? *base : (args.tiny ? config::Config::tiny() : config::Config::defaults());
  if (!args.config_file.empty()) cfg.merge_file(args.config_file);
  for (const auto& s : args.sets) cfg.set(s);
  return cfg;
}

/// The run configuration next to a checkpoint, if the checkpoint lives in a run directory.
std::optional<config::Config> manifest_config_near(const fs::path& file) {
  const fs::path dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
  if (!fs::exists(dir / manifest::kManifestFile)) return std::nullopt;
  return manifest::read_manifest(dir).config;
}

harness::LogSink logger() {
  return [](const std::string& msg) {
    if (msg.starts_with("error: ")) {
      spdlog::error("{}", msg.substr(7));
    } else if (msg.starts_with("warning: ")) {
      spdlog::warn("{}", msg.substr(9));
    } else {
      spdlog::info("{}", msg);
    }
  };
}

std::set<std::uint64_t> parse_steps(const std::string& s) {
  std::set<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) out.insert(std::stoull(item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Train small transformers and measure how post-training quantization error evolves."};
  app.require_subcommand(1);
  app.set_version_flag("--version", manifest::code_version());

  CommonArgs common;

  // train
  auto* train = app.add_subcommand("train", "Train a run from a configuration");
  add_common(train, common);
  std::string train_out;
  bool resume = false, force = false;
  std::optional<std::uint64_t> max_steps;
  train->add_option("--out", train_out, "Run directory (default: runs/<run_id>)");
  train->add_flag("--resume", resume, "Continue from the latest checkpoint");
  train->add_flag("--force", force, "Overwrite an existing run directory");
  train->add_option("--max-steps", max_steps, "Stop at this step (a checkpoint is written)");

  // branch
  auto* branch = app.add_subcommand("branch", "Cool down a trunk run from one of its checkpoints");
  add_common(branch, common);
  std::string parent_dir, branch_out;
  std::uint64_t branch_step = 0;
  std::optional<double> decay_frac;
  branch->add_option("--parent", parent_dir, "Parent run directory")->required();
  branch->add_option("--step", branch_step, "Branch step")->required();
  branch->add_option("--decay-frac", decay_frac, "Cooldown length as a fraction of the branch step");
  branch->add_option("--out", branch_out, "Child run directory")->required();
  branch->add_flag("--resume", resume, "Continue from the latest checkpoint");
  branch->add_flag("--force", force, "Overwrite an existing run directory");
  branch->add_option("--max-steps", max_steps, "Stop at this step");

  // quantize
  auto* quantize = app.add_subcommand("quantize", "Quantize one checkpoint file");
  add_common(quantize, common);
  std::string q_ckpt, q_out, q_method;
  std::optional<unsigned> q_bits;
  std::optional<std::size_t> q_group, q_calib;
  quantize->add_option("--ckpt", q_ckpt, "Checkpoint to quantize")->required()->check(CLI::ExistingFile);
  quantize->add_option("--bits", q_bits, "Bit width")->check(CLI::Range(2u, 8u));
  quantize->add_option("--method", q_method, "rtn or gptq")->check(CLI::IsMember({"rtn", "gptq"}));
  quantize->add_option("--group", q_group, "Columns per quantization group");
  quantize->add_option("--calib-samples", q_calib, "Calibration sequences");
  quantize->add_option("--out", q_out, "Output file")->required();

  // eval
  auto* eval = app.add_subcommand(
      "eval", "Evaluate a model file, or quantize and evaluate the checkpoints of a run");
  add_common(eval, common);
  std::string e_ckpt, e_run, e_steps, e_kind = "ckpt", e_method, e_bits;
  std::optional<std::uint64_t> e_every;
  auto* e_ckpt_opt = eval->add_option("--ckpt", e_ckpt, "Checkpoint or quantized model file");
  auto* e_run_opt = eval->add_option("--run", e_run, "Run directory: quantize-and-eval its checkpoints");
  e_ckpt_opt->excludes(e_run_opt);
  eval->add_option("--bits", e_bits, "Comma-separated bit widths (default: quant.bits)");
  eval->add_option("--method", e_method, "rtn or gptq")->check(CLI::IsMember({"rtn", "gptq"}));
  eval->add_option("--steps", e_steps, "Only these checkpoint steps (comma-separated)");
  eval->add_option("--every", e_every, "Only steps divisible by this");
  eval->add_option("--kind", e_kind, "ckpt or lawa")->check(CLI::IsMember({"ckpt", "lawa"}));

  // average
  auto* average = app.add_subcommand("average", "Write latest-weight averages of a run's checkpoints");
  add_common(average, common);
  std::string a_run;
  std::optional<std::size_t> a_k;
  std::optional<std::uint64_t> a_interval;
  average->add_option("--run", a_run, "Run directory")->required();
  average->add_option("--k", a_k, "Window size (default: lawa.k)");
  average->add_option("--interval", a_interval, "Checkpoint spacing (default: lawa.interval)");

  // soup
  auto* soup = app.add_subcommand("soup", "Weighted average of checkpoints");
  add_common(soup, common);
  std::vector<std::string> s_entries;
  std::string s_out;
  soup->add_option("--ckpt", s_entries, "path:weight (repeat)")->required()->take_all();
  soup->add_option("--out", s_out, "Output checkpoint")->required();

  // report
  auto* report_cmd = app.add_subcommand("report", "Render metric trajectories as SVG");
  add_common(report_cmd, common);
  std::vector<std::string> r_inputs;
  report::PlotSpec spec;
  std::string r_out;
  bool no_lr = false;
  report_cmd->add_option("--run", r_inputs, "Run directory or CSV file (repeat)")->required()->take_all();
  report_cmd->add_option("--metric", spec.metric, "Column to plot")->required();
  report_cmd->add_option("--x", spec.x, "x column (default tokens_seen)");
  report_cmd->add_flag("--log-x", spec.log_x, "Logarithmic x axis");
  report_cmd->add_flag("--no-lr", no_lr, "Omit the dotted learning-rate overlay");
  report_cmd->add_option("--title", spec.title, "Panel title");
  report_cmd->add_option("--out", r_out, "Output path stem")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Run every cell of an experiment plan");
  add_common(sweep_cmd, common);
  std::string plan_file, sweep_out;
  sweep_cmd->add_option("--plan", plan_file, "Plan file (defaults to --config)");
  sweep_cmd->add_option("--out", sweep_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfigError);
  }

  harness::TrainOptions topts;
  topts.force = force;
  topts.resume = resume;
  topts.max_steps = max_steps;
  topts.log = logger();

  if (train->parsed()) {
    const config::Config cfg = build_config(common);
    config::resolve(cfg);
    const fs::path out = train_out.empty() ? fs::path("runs") / manifest::compute_run_id(cfg, std::nullopt)
                                           : fs::path(train_out);
    const auto outcome = harness::cmd_train(cfg, out, topts);
    std::cout << "run_id " << outcome.run_id << "\nstep " << outcome.final_step << "\ndir "
              << out.string() << "\n";
    return 0;
  }

  if (branch->parsed()) {
    const manifest::RunManifest pm = manifest::read_manifest(parent_dir);
    const config::Config cfg = build_config(common, pm.config);
    for (const auto& [k, v] : cfg.values()) {
      if (k != "branch.decay_frac" && pm.config.get(k) != v) {
        throw ConfigError("branch inherits the parent configuration; '" + k + "' cannot be changed");
      }
    }
    const double frac = decay_frac.value_or(config::resolve(cfg).branch.decay_frac);
    const auto outcome = harness::cmd_branch(parent_dir, branch_step, frac, branch_out, topts);
    std::cout << "run_id " << outcome.run_id << "\nstep " << outcome.final_step << "\n";
    return 0;
  }

  if (quantize->parsed()) {
    config::Config cfg = build_config(common, manifest_config_near(q_ckpt));
    if (q_bits) cfg.set("quant.bits", std::to_string(*q_bits));
    if (!q_method.empty()) cfg.set("quant.method", q_method);
    if (q_group) cfg.set("quant.group_size", std::to_string(*q_group));
    if (q_calib) cfg.set("quant.calib_samples", std::to_string(*q_calib));
    const config::RunSettings s = config::resolve(cfg);
    if (s.quant.bits.size() != 1) throw ConfigError("quantize: pass a single --bits value");
    quant::QuantConfig qc = s.quant.base;
    qc.bits = s.quant.bits.front();
    const model::Checkpoint ckpt = io::load_checkpoint(q_ckpt);
    const harness::RunData d = harness::prepare_data(s);
    const auto qm = quant::quantize_model(ckpt, d.calib, qc, fs::path(q_ckpt).filename().string());
    io::save_quantized(q_out, qm);
    for (const auto& r : qm.reports) {
      std::printf("%-22s weight_err %.6g recon_err %.6g damping %.3g retries %u\n", r.layer.c_str(),
                  r.weight_error, r.reconstruction_error, r.damping, r.retries);
    }
    return 0;
  }

  if (eval->parsed()) {
    if (!e_run.empty()) {
      harness::QuantEvalOptions q;
      if (!e_bits.empty()) {
        for (auto b : parse_steps(e_bits)) q.bits.push_back(static_cast<unsigned>(b));
      }
      if (!e_method.empty()) q.method = quant::parse_method(e_method);
      q.filter.kind = e_kind;
      if (!e_steps.empty()) q.filter.steps = parse_steps(e_steps);
      q.filter.every = e_every;
      q.overrides = common.sets;
      q.log = logger();
      if (!common.config_file.empty()) throw ConfigError("eval --run uses the run's manifest; use --set quant.*");
      const auto outcome = harness::cmd_quantize_eval(e_run, q);
      std::cout << "rows " << outcome.rows << "\nfailures " << outcome.failures << "\n";
      return outcome.failures ? static_cast<int>(ExitCode::kPartialSweepFailure) : 0;
    }
    if (e_ckpt.empty()) throw ConfigError("eval: pass --ckpt <file> or --run <dir>");
    const config::Config cfg = build_config(common, manifest_config_near(e_ckpt));
    const harness::RunData d = harness::prepare_data(config::resolve(cfg));
    const auto r = harness::cmd_eval(e_ckpt, d);
    std::cout << "val_ce " << csv::format_real(r.ce) << "\naccuracy " << csv::format_real(r.accuracy)
              << "\npositions " << r.positions << "\n";
    return 0;
  }

  if (average->parsed()) {
    const config::Config cfg = build_config(common, manifest::read_manifest(a_run).config);
    const auto s = config::resolve(cfg);
    const auto steps = harness::cmd_average(a_run, a_k.value_or(s.lawa.k),
                                            a_interval.value_or(s.lawa.interval), logger());
    std::cout << "averaged " << steps.size() << "\n";
    return 0;
  }

  if (soup->parsed()) {
    const auto merged = harness::cmd_soup(s_entries, s_out);
    std::cout << "step " << merged.step << "\n";
    return 0;
  }

  if (report_cmd->parsed()) {
    spec.lr_overlay = !no_lr;
    std::vector<fs::path> inputs(r_inputs.begin(), r_inputs.end());
    const auto out = report::cmd_report(inputs, spec, r_out);
    std::cout << out.svg.string() << "\n" << out.data_csv.string() << "\n" << out.merged_csv.string() << "\n";
    return 0;
  }

  if (sweep_cmd->parsed()) {
    const std::string plan_path = plan_file.empty() ? common.config_file : plan_file;
    if (plan_path.empty()) throw ConfigError("sweep: pass --plan <file>");
    const auto plan = sweep::load_plan(plan_path, common.sets);
    const auto outcome = sweep::cmd_sweep(plan, sweep_out, logger());
    std::cout << "runs " << outcome.runs << "\nfailures " << outcome.failures << "\nsummary "
              << outcome.summary.string() << "\n";
    return outcome.failures ? static_cast<int>(ExitCode::kPartialSweepFailure) : 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("qlab"));
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ExitCode::kConfigError);
  } catch (const NumericFailure& e) {
    spdlog::error("numeric failure at {}: {}", e.where(), e.what());
    return static_cast<int>(ExitCode::kNumericFailure);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ExitCode::kFailure);
  }
}
