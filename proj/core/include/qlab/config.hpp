#pragma once

// Run configuration: `section.key = value` text with `#` comments.
// Every key has a registered default; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qlab/model.hpp"
#include "qlab/optim.hpp"
#include "qlab/quant.hpp"

namespace qlab::config {

/// Resolved key/value set, ordered by key.
class Config {
 public:
  /// All registered keys at their defaults.
  static Config defaults();
  /// Defaults for the reduced CI profile (small model, short run).
  static Config tiny();

  /// Parses `text` on top of the current values. Collects every problem
  /// (syntax, unknown key) and throws one ConfigError listing them.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void merge_file(const std::filesystem::path& path);
  /// `section.key=value`
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  /// Canonical text: one sorted `key = value` line per key.
  std::string to_text() const;

  friend bool operator==(const Config&, const Config&) = default;

 private:
  std::map<std::string, std::string> values_;
};

bool is_known_key(const std::string& key);

struct DataSettings {
  std::string path;                 // empty: synthetic corpus
  std::uint64_t limit_bytes = 0;    // 0: whole file
  std::uint64_t synthetic_bytes = 0;
  double val_fraction = 0.0;
  double calib_fraction = 0.0;
  std::uint64_t seed = 0;
};

struct EvalSettings {
  std::size_t batches = 64;
  std::size_t batch_size = 8;
  std::uint64_t interval = 500;
};

struct TrainSettings {
  optim::BatchPlan plan;
  std::uint64_t ckpt_interval = 500;
};

struct QuantSettings {
  std::vector<unsigned> bits;
  quant::QuantConfig base;  // bits overwritten per entry of `bits`
  std::size_t calib_samples = 128;
};

struct LawaSettings {
  std::size_t k = 5;
  std::uint64_t interval = 500;
};

struct BranchSettings {
  std::string parent_run;  // empty for trunk runs
  std::uint64_t step = 0;
  double decay_frac = 0.1;
};

/// Typed view of a Config.
struct RunSettings {
  model::ModelConfig model;
  DataSettings data;
  optim::OptimConfig optim;
  optim::ScheduleSpec schedule;
  TrainSettings train;
  EvalSettings eval;
  QuantSettings quant;
  LawaSettings lawa;
  BranchSettings branch;
};

/// Converts and cross-validates every value. All problems are reported in a
/// single ConfigError before any compute starts.
RunSettings resolve(const Config& cfg);

}  // namespace qlab::config
