#include "qlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "qlab/averaging.hpp"
#include "qlab/checkpoint_io.hpp"
#include "qlab/error.hpp"
#include "qlab/fnv.hpp"
#include "qlab/metrics_csv.hpp"
#include "qlab/optim.hpp"
#include "qlab/synthetic_corpus.hpp"

namespace qlab::harness {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMetricsFile = "metrics.csv";
constexpr const char* kNormsFile = "norms.csv";
constexpr const char* kNormsHeader = "step,tokens_seen,lr,train_loss,grad_norm,weight_norm";

void say(const LogSink& log, const std::string& msg) {
  if (log) log(msg);
}

fs::path ckpt_path(const fs::path& dir, std::uint64_t step, const std::string& kind = "ckpt") {
  return dir / (kind + "_" + std::to_string(step) + ".qlab");
}

std::optional<std::uint64_t> parse_step(const std::string& filename, const std::string& kind) {
  const std::string prefix = kind + "_";
  const std::string suffix = ".qlab";
  if (!filename.starts_with(prefix) || !filename.ends_with(suffix)) return std::nullopt;
  const std::string digits =
      filename.substr(prefix.size(), filename.size() - prefix.size() - suffix.size());
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
  if (digits.empty() || ec != std::errc() || p != digits.data() + digits.size()) return std::nullopt;
  return v;
}

/// Latest checkpoint step that also has optimizer state.
std::optional<std::uint64_t> latest_resumable(const fs::path& dir) {
  std::optional<std::uint64_t> best;
  for (const auto& [step, path] : list_checkpoints(dir, "ckpt")) {
    if (fs::exists(io::optimizer_path_for(path))) best = step;
  }
  return best;
}

void rewrite_norms(const fs::path& dir, std::uint64_t keep_through) {
  const fs::path path = dir / kNormsFile;
  std::ifstream in(path);
  std::string content = std::string(kNormsHeader) + "\n";
  std::string line;
  if (in && std::getline(in, line)) {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= keep_through) content += line + "\n";
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << content;
}

/// Decides what to do with an existing directory. Returns the step to resume
/// from, or nullopt for a fresh start (directory empty or absent).
std::optional<std::uint64_t> claim_directory(const fs::path& dir, const std::string& run_id,
                                             const TrainOptions& opts) {
  if (!fs::exists(dir)) return std::nullopt;
  const bool has_manifest = fs::exists(dir / manifest::kManifestFile);
  if (opts.force) {
    fs::remove_all(dir);
    return std::nullopt;
  }
  if (!has_manifest) {
    if (fs::is_directory(dir) && fs::is_empty(dir)) return std::nullopt;
    throw RunStateError(dir.string() + " exists and is not a run directory; use --force to replace it");
  }
  const manifest::RunManifest existing = manifest::read_manifest(dir);
  if (existing.run_id != run_id) {
    throw RunStateError(dir.string() + " holds run " + existing.run_id + ", not " + run_id +
                        "; use --force to replace it");
  }
  if (!opts.resume) {
    throw RunStateError("run " + run_id + " already exists in " + dir.string() +
                        "; pass --resume to continue it or --force to overwrite it");
  }
  return latest_resumable(dir);
}

struct LoopContext {
  fs::path dir;
  std::string run_id;
  const config::RunSettings* settings = nullptr;
  optim::ScheduleSpec schedule;
  std::uint64_t first_step = 0;
  const RunData* data = nullptr;
};

metrics::MetricRecord training_row(const LoopContext& ctx, const optim::TrainState& st,
                                   const std::optional<optim::StepLog>& last) {
  metrics::MetricRecord r;
  r.run_id = ctx.run_id;
  r.step = st.ckpt.step;
  r.tokens_seen = st.ckpt.tokens_seen;
  const std::uint64_t lr_step = r.step == 0 ? 0 : r.step - 1;
  r.lr = optim::schedule_value(ctx.schedule, ctx.settings->optim.peak_lr, lr_step);
  if (last && last->step == r.step) {
    r.train_loss = last->train_loss;
    r.grad_norm = last->grad_norm;
  }
  const metrics::EvalResult ev = metrics::evaluate(st.ckpt, ctx.data->eval);
  r.val_ce_fp = ev.ce;
  r.acc_fp = ev.accuracy;
  r.weight_norm = metrics::weight_norm(st.ckpt);
  r.derive();
  r.validate();
  return r;
}

TrainOutcome run_loop(const LoopContext& ctx, optim::TrainState state, bool fresh,
                      const TrainOptions& opts) {
  const config::RunSettings& s = *ctx.settings;
  const std::uint64_t end = ctx.schedule.end_step();
  std::uint64_t stop = end;
  if (opts.max_steps) stop = std::min(stop, std::max(*opts.max_steps, state.ckpt.step));
  std::set<std::uint64_t> ckpts = checkpoint_steps(s, ctx.schedule, ctx.first_step);
  ckpts.insert(stop);

  const fs::path metrics_path = ctx.dir / kMetricsFile;
  std::string norms_buffer;
  std::optional<optim::StepLog> last;

  auto save = [&](const optim::TrainState& st) {
    const fs::path p = ckpt_path(ctx.dir, st.ckpt.step);
    io::save_checkpoint(p, st.ckpt);
    io::save_optimizer_state(io::optimizer_path_for(p), st.opt, st.cursor);
    std::ofstream(ctx.dir / kNormsFile, std::ios::app) << norms_buffer;
    norms_buffer.clear();
  };

  if (fresh) {
    std::ofstream(ctx.dir / kNormsFile, std::ios::trunc) << kNormsHeader << "\n";
    csv::merge_into(metrics_path, {training_row(ctx, state, std::nullopt)});
    save(state);
    say(opts.log, "step " + std::to_string(state.ckpt.step) + ": initial checkpoint written");
  }

  optim::TrainHooks hooks;
  hooks.after_step = [&](const optim::TrainState&, const optim::StepLog& log) {
    last = log;
    norms_buffer += std::to_string(log.step) + "," + std::to_string(log.tokens_seen) + "," +
                    csv::format_real(log.lr) + "," + csv::format_real(log.train_loss) + "," +
                    csv::format_real(log.grad_norm) + "," + csv::format_real(log.weight_norm) + "\n";
  };

  const std::uint64_t eval_every = s.eval.interval;
  while (state.ckpt.step < stop) {
    const std::uint64_t step = state.ckpt.step;
    std::uint64_t next = std::min(stop, (step / eval_every + 1) * eval_every);
    if (auto it = ckpts.upper_bound(step); it != ckpts.end()) next = std::min(next, *it);
    optim::train_loop(state, ctx.schedule, s.optim, ctx.data->splits.train, s.train.plan,
                      next - step, hooks);
    const bool is_ckpt = ckpts.contains(next);
    if (is_ckpt || next % eval_every == 0) {
      const metrics::MetricRecord row = training_row(ctx, state, last);
      csv::merge_into(metrics_path, {row});
      say(opts.log, "step " + std::to_string(next) + ": train_loss " +
                        csv::format_real(last ? last->train_loss : 0.0) + " val_ce " +
                        csv::format_real(*row.val_ce_fp));
    }
    if (is_ckpt) save(state);
  }
  return {ctx.run_id, state.ckpt.step, state.ckpt.step == end};
}

void record_info(manifest::RunManifest& m, const config::RunSettings& s, const RunData& d) {
  m.info["data.corpus_hash"] = to_hex(d.corpus_hash);
  m.info["data.train_tokens"] = std::to_string(d.splits.train.size());
  m.info["data.val_tokens"] = std::to_string(d.splits.val.size());
  m.info["data.calib_tokens"] = std::to_string(d.splits.calib.size());
  m.info["eval.content_hash"] = to_hex(d.eval_hash);
  m.info["eval.sequences"] = std::to_string(d.eval.size() * s.eval.batch_size);
  m.info["quant.calib_sequences"] = std::to_string(d.calib.sample_count);
  m.info["quant.grid"] = "asymmetric_minmax_including_zero";
  m.info["quant.column_order"] = "natural";
  m.info["model.norm"] = "rms_gain_only";
  m.info["model.params"] = [&] {
    std::size_t n = 0;
    for (const auto& t : model::tensor_layout(s.model)) n += t.rows * t.cols;
    return std::to_string(n);
  }();
  m.info["optim.decay_exempt"] = "norm_gains,embeddings";
  m.info["optim.weight_decay_form"] = s.optim.decoupled_wd ? "lr_ratio" : "lr_coupled";
}

}  // namespace

RunData prepare_data(const config::RunSettings& s) {
  RunData d;
  data::TokenStream stream;
  if (!s.data.path.empty()) {
    std::optional<std::size_t> limit;
    if (s.data.limit_bytes > 0) limit = s.data.limit_bytes;
    stream = data::load_corpus(s.data.path, limit);
  } else {
    const std::string text = data::synthetic_corpus(s.data.synthetic_bytes, s.data.seed);
    stream = data::stream_from_bytes(
        {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  }
  Fnv1a h;
  for (data::TokenId t : stream.tokens) {
    const auto b = static_cast<std::uint8_t>(t);
    h.update({&b, 1});
  }
  d.corpus_hash = h.digest();
  d.splits = data::split(stream, s.data.val_fraction, s.data.calib_fraction, s.data.seed);

  const std::size_t seq = s.model.seq_len;
  d.eval = data::fixed_batches(d.splits.val, s.eval.batches * s.eval.batch_size, s.eval.batch_size, seq);
  if (d.eval.empty()) throw ConfigError("validation slice holds no full window of data.seq_len tokens");
  d.eval_hash = data::content_hash(d.eval);
  d.calib = data::make_calibration(d.splits.calib, s.quant.calib_samples, seq);
  if (data::windows_per_epoch(d.splits.train, seq) < s.train.plan.micro_batch_size) {
    throw ConfigError("training slice is shorter than one micro-batch");
  }
  return d;
}

std::size_t thread_budget() {
  if (const char* env = std::getenv("QLAB_THREADS")) {
    std::size_t v = 0;
    const std::string_view sv(env);
    auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
    if (ec != std::errc() || p != sv.data() + sv.size() || v == 0) {
      throw ConfigError("QLAB_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

optim::ScheduleSpec run_schedule(const config::RunSettings& s,
                                 const std::optional<manifest::ParentRef>& parent) {
  optim::ScheduleSpec spec = s.schedule;
  if (parent) {
    if (parent->branch_step > spec.total_steps) {
      throw ConfigError("branch step " + std::to_string(parent->branch_step) +
                        " lies beyond the parent schedule (" + std::to_string(spec.total_steps) +
                        " steps)");
    }
    optim::Cooldown c;
    c.start_step = parent->branch_step;
    c.length = static_cast<std::uint64_t>(
        std::llround(s.branch.decay_frac * static_cast<double>(parent->branch_step)));
    c.start_lr = optim::schedule_value(spec, s.optim.peak_lr, parent->branch_step);
    spec.cooldown = c;
  }
  spec.validate();
  return spec;
}

std::set<std::uint64_t> checkpoint_steps(const config::RunSettings& s,
                                         const optim::ScheduleSpec& schedule,
                                         std::uint64_t first_step) {
  const std::uint64_t end = schedule.end_step();
  std::set<std::uint64_t> out{first_step, end};
  for (std::uint64_t t = 0; t <= end; t += s.train.ckpt_interval) out.insert(t);
  out.insert(schedule.warmup_steps);
  if (schedule.kind == optim::ScheduleKind::kWsd) out.insert(schedule.total_steps - schedule.decay_steps);
  if (schedule.cooldown) out.insert(schedule.cooldown->start_step);
  std::erase_if(out, [&](std::uint64_t t) { return t < first_step || t > end; });
  return out;
}

TrainOutcome cmd_train(const config::Config& cfg, const fs::path& run_dir,
                       const TrainOptions& opts) {
  const config::RunSettings s = config::resolve(cfg);
  if (!s.branch.parent_run.empty()) {
    throw ConfigError("branch.parent_run is set by the branch command, not by train");
  }
  const optim::ScheduleSpec schedule = run_schedule(s, std::nullopt);
  manifest::RunManifest m = manifest::make_manifest(cfg, std::nullopt);
  const RunData d = prepare_data(s);

  const std::optional<std::uint64_t> resume_from = claim_directory(run_dir, m.run_id, opts);
  LoopContext ctx{run_dir, m.run_id, &s, schedule, 0, &d};
  if (resume_from) {
    const fs::path p = ckpt_path(run_dir, *resume_from);
    optim::TrainState st;
    st.ckpt = io::load_checkpoint(p);
    std::tie(st.opt, st.cursor) = io::load_optimizer_state(io::optimizer_path_for(p));
    csv::truncate_after(run_dir / kMetricsFile, m.run_id, *resume_from);
    rewrite_norms(run_dir, *resume_from);
    say(opts.log, "resuming run " + m.run_id + " at step " + std::to_string(*resume_from));
    return run_loop(ctx, std::move(st), false, opts);
  }

  record_info(m, s, d);
  manifest::write_manifest(run_dir, m);
  say(opts.log, "run " + m.run_id + " in " + run_dir.string());
  optim::TrainState st;
  st.ckpt = model::init<float>(s.model);
  st.opt = optim::init_state(st.ckpt);
  return run_loop(ctx, std::move(st), true, opts);
}

TrainOutcome cmd_branch(const fs::path& parent_dir, std::uint64_t branch_step, double decay_frac,
                        const fs::path& run_dir, const TrainOptions& opts) {
  const manifest::RunManifest pm = manifest::read_manifest(parent_dir);
  config::Config cfg = pm.config;
  cfg.set("branch.parent_run", pm.run_id);
  cfg.set("branch.step", std::to_string(branch_step));
  std::ostringstream frac;
  frac.precision(17);
  frac << decay_frac;
  cfg.set("branch.decay_frac", frac.str());
  const config::RunSettings s = config::resolve(cfg);
  const manifest::ParentRef parent{pm.run_id, branch_step};
  const optim::ScheduleSpec schedule = run_schedule(s, parent);

  const fs::path src = ckpt_path(parent_dir, branch_step);
  if (!fs::exists(src) || !fs::exists(io::optimizer_path_for(src))) {
    std::string have;
    for (const auto& [step, path] : list_checkpoints(parent_dir)) {
      if (fs::exists(io::optimizer_path_for(path))) have += (have.empty() ? "" : ", ") + std::to_string(step);
    }
    throw RunStateError("parent run " + parent_dir.string() + " has no checkpoint with optimizer state at step " +
                        std::to_string(branch_step) + "; materialize " + src.filename().string() +
                        " by training the parent config with --max-steps " + std::to_string(branch_step) +
                        " (available steps: " + (have.empty() ? "none" : have) + ")");
  }

  manifest::RunManifest m = manifest::make_manifest(cfg, parent);
  const RunData d = prepare_data(s);
  const std::optional<std::uint64_t> resume_from = claim_directory(run_dir, m.run_id, opts);
  LoopContext ctx{run_dir, m.run_id, &s, schedule, branch_step, &d};

  const std::uint64_t start = resume_from.value_or(branch_step);
  const fs::path from = resume_from ? ckpt_path(run_dir, start) : src;
  optim::TrainState st;
  st.ckpt = io::load_checkpoint(from);
  std::tie(st.opt, st.cursor) = io::load_optimizer_state(io::optimizer_path_for(from));
  if (st.ckpt.step != start) throw FormatError(from.string() + " records a different step");

  if (resume_from) {
    csv::truncate_after(run_dir / kMetricsFile, m.run_id, start);
    rewrite_norms(run_dir, start);
    return run_loop(ctx, std::move(st), false, opts);
  }
  record_info(m, s, d);
  m.info["branch.cooldown_steps"] = std::to_string(schedule.cooldown->length);
  m.info["branch.start_lr"] = csv::format_real(schedule.cooldown->start_lr);
  manifest::write_manifest(run_dir, m);
  say(opts.log, "branch " + m.run_id + " of " + pm.run_id + " at step " + std::to_string(branch_step) +
                    ", cooldown " + std::to_string(schedule.cooldown->length) + " steps");
  return run_loop(ctx, std::move(st), true, opts);
}

bool CheckpointFilter::matches(std::uint64_t step) const {
  if (steps && !steps->contains(step)) return false;
  if (every && *every > 0 && step % *every != 0) return false;
  return true;
}

std::vector<std::pair<std::uint64_t, fs::path>> list_checkpoints(const fs::path& run_dir,
                                                                 const std::string& kind) {
  std::vector<std::pair<std::uint64_t, fs::path>> out;
  if (!fs::is_directory(run_dir)) return out;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.ends_with(".opt.qlab")) continue;
    if (auto step = parse_step(name, kind)) out.emplace_back(*step, entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string row_run_id(const std::string& run_id, const std::string& kind, quant::Method method) {
  std::string id = run_id;
  if (kind != "ckpt") id += "+" + kind;
  if (method != quant::Method::kGptq) id += "+" + quant::to_string(method);
  return id;
}

QuantEvalOutcome cmd_quantize_eval(const fs::path& run_dir, const QuantEvalOptions& opts) {
  const manifest::RunManifest m = manifest::read_manifest(run_dir);
  config::Config cfg = m.config;
  for (const auto& o : opts.overrides) {
    if (!o.starts_with("quant.")) throw ConfigError("only quant.* keys may be overridden here: " + o);
    cfg.set(o);
  }
  const config::RunSettings s = config::resolve(cfg);
  const std::vector<unsigned> bits = opts.bits.empty() ? s.quant.bits : opts.bits;
  for (unsigned b : bits) {
    if (b != 3 && b != 4) throw ConfigError("metrics rows hold 3- and 4-bit results only; got " + std::to_string(b));
  }
  const quant::Method method = opts.method.value_or(s.quant.base.method);

  std::vector<std::pair<std::uint64_t, fs::path>> jobs;
  for (auto& [step, path] : list_checkpoints(run_dir, opts.filter.kind)) {
    if (opts.filter.matches(step)) jobs.emplace_back(step, path);
  }
  if (jobs.empty()) {
    say(opts.log, "warning: no checkpoints in " + run_dir.string() + " match the filter");
    return {};
  }
  const RunData d = prepare_data(s);
  const std::string row_id = row_run_id(m.run_id, opts.filter.kind, method);
  const fs::path metrics_path = run_dir / kMetricsFile;

  std::atomic<std::size_t> rows{0}, failures{0};
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    std::lock_guard<std::mutex> lock(log_mutex);
    say(opts.log, msg);
  };
  parallel_for(jobs.size(), thread_budget(), [&](std::size_t i) {
    const auto& [step, path] = jobs[i];
    try {
      const model::Checkpoint ckpt = io::load_checkpoint(path);
      metrics::MetricRecord r;
      r.run_id = row_id;
      r.step = ckpt.step;
      r.tokens_seen = ckpt.tokens_seen;
      const metrics::EvalResult fp = metrics::evaluate(ckpt, d.eval);
      r.val_ce_fp = fp.ce;
      r.acc_fp = fp.accuracy;
      r.weight_norm = metrics::weight_norm(ckpt);
      for (unsigned b : bits) {
        quant::QuantConfig qc = s.quant.base;
        qc.bits = b;
        qc.method = method;
        const quant::QuantizedModel qm =
            quant::quantize_model(ckpt, d.calib, qc, m.run_id + "@" + std::to_string(step));
        const metrics::EvalResult q = metrics::evaluate(qm, d.eval);
        r.val_ce_q[b] = q.ce;
        r.acc_q[b] = q.accuracy;
      }
      r.derive();
      r.validate();
      csv::merge_into(metrics_path, {r});
      ++rows;
      std::string msg = path.filename().string() + ": ce_fp " + csv::format_real(fp.ce);
      for (unsigned b : bits) msg += " ce_q" + std::to_string(b) + " " + csv::format_real(r.val_ce_q[b]);
      log(msg);
    } catch (const std::exception& e) {
      ++failures;
      log("error: " + path.filename().string() + ": " + e.what());
    }
  });
  return {rows.load(), failures.load()};
}

std::vector<std::uint64_t> cmd_average(const fs::path& run_dir, std::size_t k,
                                       std::uint64_t interval, const LogSink& log) {
  if (k == 0 || interval == 0) throw ConfigError("average: k and interval must be positive");
  manifest::read_manifest(run_dir);
  std::map<std::uint64_t, fs::path> ckpts;
  for (auto& [step, path] : list_checkpoints(run_dir, "ckpt")) {
    if (step % interval == 0) ckpts.emplace(step, path);
  }
  std::vector<std::uint64_t> written;
  avg::AveragingWindow window(k);
  std::optional<std::uint64_t> prev;
  for (const auto& [step, path] : ckpts) {
    if (prev && step != *prev + interval) window = avg::AveragingWindow(k);
    prev = step;
    const model::Checkpoint& mean = window.push(io::load_checkpoint(path));
    if (window.size() < k) continue;
    const fs::path out = ckpt_path(run_dir, step, "lawa");
    if (fs::exists(out)) {
      if (io::load_checkpoint(out).tensors != mean.tensors) {
        throw RunStateError(out.string() + " exists with different contents (other k or interval?)");
      }
    } else {
      io::save_checkpoint(out, mean);
    }
    written.push_back(step);
    say(log, "wrote " + out.filename().string());
  }
  return written;
}

model::Checkpoint cmd_soup(const std::vector<std::string>& entries, const fs::path& out) {
  std::vector<model::Checkpoint> ckpts;
  std::vector<double> weights;
  for (const auto& e : entries) {
    const auto colon = e.rfind(':');
    if (colon == std::string::npos) throw ConfigError("soup entry '" + e + "' is not path:weight");
    double w = 0.0;
    const std::string ws = e.substr(colon + 1);
    auto [p, ec] = std::from_chars(ws.data(), ws.data() + ws.size(), w);
    if (ws.empty() || ec != std::errc() || p != ws.data() + ws.size() || !std::isfinite(w)) {
      throw ConfigError("soup entry '" + e + "': bad weight");
    }
    ckpts.push_back(io::load_checkpoint(e.substr(0, colon)));
    weights.push_back(w);
  }
  model::Checkpoint merged;
  try {
    merged = avg::soup(ckpts, weights);
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  io::save_checkpoint(out, merged);
  return merged;
}

metrics::EvalResult cmd_eval(const fs::path& model_file, const RunData& data) {
  const io::TensorFile f = io::read_file(model_file);
  if (f.has_meta("kind") && f.meta_value("kind") == "quantized") {
    return metrics::evaluate(io::load_quantized(model_file), data.eval);
  }
  return metrics::evaluate(io::checkpoint_from_file(f), data.eval);
}

}  // namespace qlab::harness
