#include "qlab/sweep.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>

#include "qlab/error.hpp"
#include "qlab/metrics_csv.hpp"

namespace qlab::sweep {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t to_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(what + ": '" + s + "' is not a non-negative integer");
  }
  return v;
}

struct RunResult {
  std::size_t cell = 0;
  std::uint64_t branch_step = 0;  // 0 for trunks
  bool is_branch = false;
  fs::path dir;
  std::string run_id;
  std::string status = "ok";
  std::optional<metrics::MetricRecord> final_row;
};

std::optional<metrics::MetricRecord> final_row(const fs::path& dir, const std::string& run_id) {
  std::optional<metrics::MetricRecord> best;
  for (auto& r : csv::read_metrics(dir / "metrics.csv")) {
    if (r.run_id == run_id && (!best || r.step > best->step)) best = r;
  }
  return best;
}

}  // namespace

ExperimentPlan parse_plan(const std::string& text, const std::vector<std::string>& overrides) {
  ExperimentPlan plan;
  std::vector<std::pair<std::string, std::string>> base_entries;
  std::vector<std::string> problems;
  std::string profile = "desk";
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (auto h = raw.find('#'); h != std::string::npos) raw.resize(h);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "plan:" + std::to_string(line_no);
    if (eq == std::string::npos) {
      problems.push_back(where + ": expected 'key = value'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "profile") {
        if (value != "desk" && value != "tiny") throw ConfigError("profile must be desk or tiny");
        profile = value;
      } else if (key == "seeds") {
        plan.seeds.clear();
        for (const auto& s : split_list(value)) plan.seeds.push_back(to_u64(s, "seeds"));
        if (plan.seeds.empty()) throw ConfigError("seeds: empty list");
      } else if (key == "seed_key") {
        if (!config::is_known_key(value)) throw ConfigError("seed_key: unknown key '" + value + "'");
        plan.seed_key = value;
      } else if (key.starts_with("axis.")) {
        const std::string k = key.substr(5);
        if (!config::is_known_key(k)) throw ConfigError("unknown axis key '" + k + "'");
        Axis a{k, split_list(value)};
        if (a.values.empty()) throw ConfigError("axis " + k + ": no values");
        plan.axes.push_back(std::move(a));
      } else if (key == "branch.steps") {
        for (const auto& s : split_list(value)) plan.branch_steps.push_back(to_u64(s, "branch.steps"));
      } else if (key == "branch.decay_frac") {
        plan.branch_decay_frac = std::stod(value);
      } else if (key == "quant_eval") {
        if (value != "final" && value != "all" && value != "none") {
          throw ConfigError("quant_eval must be final, all or none");
        }
        plan.quant_eval = value;
      } else if (key.starts_with("base.")) {
        base_entries.emplace_back(key.substr(5), value);
      } else {
        throw ConfigError("unknown plan key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      problems.push_back(where + ": " + e.what());
    } catch (const std::invalid_argument&) {
      problems.push_back(where + ": bad number '" + value + "'");
    }
  }
  plan.base = profile == "tiny" ? config::Config::tiny() : config::Config::defaults();
  for (const auto& [k, v] : base_entries) {
    try {
      plan.base.set(k, v);
    } catch (const ConfigError& e) {
      problems.push_back(std::string("base: ") + e.what());
    }
  }
  for (const auto& o : overrides) {
    try {
      plan.base.set(o);
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid sweep plan:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  // Every cell must resolve before anything runs.
  for (const auto& cell : enumerate(plan)) config::resolve(cell.config);
  return plan;
}

ExperimentPlan load_plan(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read plan file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str(), overrides);
}

std::vector<Cell> enumerate(const ExperimentPlan& plan) {
  std::vector<Cell> cells;
  std::vector<std::size_t> idx(plan.axes.size(), 0);
  for (;;) {
    for (std::uint64_t seed : plan.seeds) {
      Cell c;
      c.index = cells.size();
      c.seed = seed;
      c.config = plan.base;
      for (std::size_t a = 0; a < plan.axes.size(); ++a) {
        c.assignment[plan.axes[a].key] = plan.axes[a].values[idx[a]];
        c.config.set(plan.axes[a].key, plan.axes[a].values[idx[a]]);
      }
      c.config.set(plan.seed_key, std::to_string(seed));
      cells.push_back(std::move(c));
    }
    // Odometer increment, last axis fastest.
    std::size_t a = plan.axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < plan.axes[a].values.size()) break;
      idx[a] = 0;
      if (a == 0) return cells;
    }
    if (plan.axes.empty()) return cells;
  }
}

SweepOutcome cmd_sweep(const ExperimentPlan& plan, const fs::path& out_dir,
                       const harness::LogSink& log) {
  const std::vector<Cell> cells = enumerate(plan);
  fs::create_directories(out_dir);
  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };

  std::vector<std::vector<RunResult>> results(cells.size());
  harness::parallel_for(cells.size(), harness::thread_budget(), [&](std::size_t i) {
    const Cell& cell = cells[i];
    char name[32];
    std::snprintf(name, sizeof(name), "cell%03zu", cell.index);
    auto quant_eval = [&](const RunResult& r, std::uint64_t final_step) -> bool {
      if (plan.quant_eval == "none") return true;
      harness::QuantEvalOptions q;
      if (plan.quant_eval == "final") q.filter.steps = std::set<std::uint64_t>{final_step};
      q.log = [&](const std::string& m) { say(r.dir.filename().string() + ": " + m); };
      return harness::cmd_quantize_eval(r.dir, q).failures == 0;
    };

    RunResult trunk;
    trunk.cell = cell.index;
    trunk.dir = out_dir / name;
    harness::TrainOptions opts;
    opts.resume = true;
    opts.log = [&](const std::string& m) { say(std::string(name) + ": " + m); };
    try {
      const auto outcome = harness::cmd_train(cell.config, trunk.dir, opts);
      trunk.run_id = outcome.run_id;
      if (!quant_eval(trunk, outcome.final_step)) trunk.status = "failed: quantize-eval";
      trunk.final_row = final_row(trunk.dir, trunk.run_id);
    } catch (const std::exception& e) {
      trunk.status = std::string("failed: ") + e.what();
      say(std::string(name) + ": " + trunk.status);
      results[i].push_back(std::move(trunk));
      return;
    }
    const fs::path trunk_dir = trunk.dir;
    results[i].push_back(std::move(trunk));

    for (std::uint64_t b : plan.branch_steps) {
      RunResult br;
      br.cell = cell.index;
      br.is_branch = true;
      br.branch_step = b;
      br.dir = out_dir / (std::string(name) + "_b" + std::to_string(b));
      try {
        const auto outcome = harness::cmd_branch(trunk_dir, b, plan.branch_decay_frac, br.dir, opts);
        br.run_id = outcome.run_id;
        if (!quant_eval(br, outcome.final_step)) br.status = "failed: quantize-eval";
        br.final_row = final_row(br.dir, br.run_id);
      } catch (const std::exception& e) {
        br.status = std::string("failed: ") + e.what();
        say(br.dir.filename().string() + ": " + br.status);
      }
      results[i].push_back(std::move(br));
    }
  });

  csv::Table summary;
  for (const auto& a : plan.axes) summary.columns.push_back(a.key);
  for (const char* c : {"seed", "branch_step", "run_id", "run_dir", "status", "final_step",
                        "tokens_seen", "val_ce_fp", "val_ce_q3", "val_ce_q4", "rel_ce_err3",
                        "rel_ce_err4", "delta_ptq3", "delta_ptq4"}) {
    summary.columns.push_back(c);
  }
  SweepOutcome out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (const auto& r : results[i]) {
      ++out.runs;
      if (r.status != "ok") ++out.failures;
      std::vector<std::string> row;
      for (const auto& a : plan.axes) row.push_back(cells[i].assignment.at(a.key));
      row.push_back(std::to_string(cells[i].seed));
      row.push_back(r.is_branch ? std::to_string(r.branch_step) : "");
      row.push_back(r.run_id);
      row.push_back(r.dir.filename().string());
      std::string status = r.status;
      std::replace(status.begin(), status.end(), ',', ';');
      std::replace(status.begin(), status.end(), '\n', ' ');
      row.push_back(status);
      // Remaining columns come straight from the run's last metrics row.
      std::vector<std::string> tail(9);
      if (r.final_row) {
        const auto cells_text = [&] {
          std::vector<std::string> v;
          std::string line = csv::to_line(*r.final_row);
          std::size_t start = 0;
          for (;;) {
            const auto c = line.find(',', start);
            v.push_back(line.substr(start, c == std::string::npos ? std::string::npos : c - start));
            if (c == std::string::npos) break;
            start = c + 1;
          }
          return v;
        }();
        const auto& cols = csv::metric_columns();
        auto col = [&](const std::string& name) {
          return cells_text[static_cast<std::size_t>(std::find(cols.begin(), cols.end(), name) - cols.begin())];
        };
        tail = {col("step"),        col("tokens_seen"), col("val_ce_fp"),  col("val_ce_q3"),
                col("val_ce_q4"),   col("rel_ce_err3"), col("rel_ce_err4"), col("delta_ptq3"),
                col("delta_ptq4")};
      }
      row.insert(row.end(), tail.begin(), tail.end());
      summary.rows.push_back(std::move(row));
    }
  }
  out.summary = out_dir / "summary.csv";
  csv::write_table(out.summary, summary);
  return out;
}

}  // namespace qlab::sweep
