#include "qlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "qlab/error.hpp"

namespace qlab::config {

namespace {

struct KeyInfo {
  const char* key;
  const char* desk;
  const char* tiny;  // nullptr: same as desk
};

// clang-format off
constexpr KeyInfo kKeys[] = {
    {"data.path",               "",            nullptr},
    {"data.limit_bytes",        "0",           nullptr},
    {"data.synthetic_bytes",    "8000000",     "1500000"},
    {"data.val_fraction",       "0.02",        "0.04"},
    {"data.calib_fraction",     "0.01",        "0.02"},
    {"data.seq_len",            "256",         "64"},
    {"data.seed",               "0",           nullptr},

    {"model.d_model",           "192",         "64"},
    {"model.n_layers",          "6",           "4"},
    {"model.n_heads",           "6",           "4"},
    {"model.d_ff",              "768",         "256"},
    {"model.init_seed",         "1",           nullptr},
    {"model.init_std",          "0.02",        nullptr},

    {"optim.variant",           "adamw",       nullptr},
    {"optim.peak_lr",           "0.003",       nullptr},
    {"optim.beta1",             "0.9",         nullptr},
    {"optim.beta2",             "0.95",        nullptr},
    {"optim.eps",               "1e-8",        nullptr},
    {"optim.weight_decay",      "0.1",         nullptr},
    {"optim.clip_norm",         "1",           nullptr},
    {"optim.decoupled_wd",      "false",       nullptr},

    {"schedule.kind",           "wsd",         nullptr},
    {"schedule.total_steps",    "30000",       "2000"},
    {"schedule.warmup_frac",    "0.01",        "0.025"},
    {"schedule.decay_frac",     "0.1",         nullptr},
    {"schedule.min_lr",         "0",           nullptr},

    {"train.batch_size",        "64",          "16"},
    {"train.micro_batch_size",  "16",          "16"},
    {"train.ckpt_interval",     "500",         "100"},

    {"eval.batches",            "64",          "16"},
    {"eval.batch_size",         "8",           nullptr},
    {"eval.interval",           "500",         "100"},

    {"quant.bits",              "3,4",         nullptr},
    {"quant.method",            "gptq",        nullptr},
    {"quant.group_size",        "128",         "64"},
    {"quant.damping_frac",      "0.01",        nullptr},
    {"quant.calib_samples",     "128",         "64"},
    {"quant.propagate",         "true",        nullptr},
    {"quant.group_stats",       "compensated", nullptr},

    {"lawa.k",                  "5",           nullptr},
    {"lawa.interval",           "500",         "100"},

    {"branch.parent_run",       "",            nullptr},
    {"branch.step",             "0",           nullptr},
    {"branch.decay_frac",       "0.1",         nullptr},
};
// clang-format on

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
std::optional<T> parse_as(const std::string& s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  return std::nullopt;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Accumulates messages so all problems surface in one error.
class Problems {
 public:
  void add(std::string msg) { msgs_.push_back(std::move(msg)); }
  void raise_if_any(const std::string& heading) const {
    if (msgs_.empty()) return;
    std::string text = heading;
    for (const auto& m : msgs_) text += "\n  " + m;
    throw ConfigError(text);
  }

 private:
  std::vector<std::string> msgs_;
};

}  // namespace

bool is_known_key(const std::string& key) {
  return std::any_of(std::begin(kKeys), std::end(kKeys),
                     [&](const KeyInfo& k) { return key == k.key; });
}

Config Config::defaults() {
  Config c;
  for (const auto& k : kKeys) c.values_[k.key] = k.desk;
  return c;
}

Config Config::tiny() {
  Config c;
  for (const auto& k : kKeys) c.values_[k.key] = k.tiny ? k.tiny : k.desk;
  return c;
}

void Config::merge_text(const std::string& text, const std::string& origin) {
  Problems problems;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::map<std::string, std::string> staged;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no);
    if (eq == std::string::npos) {
      problems.add(where + ": expected 'section.key = value'");
      continue;
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!is_known_key(key)) {
      problems.add(where + ": unknown key '" + key + "'");
      continue;
    }
    staged[key] = value;
  }
  problems.raise_if_any("invalid configuration:");
  for (auto& [k, v] : staged) values_[k] = std::move(v);
}

void Config::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

void Config::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set(trim(std::string_view(assignment).substr(0, eq)),
      trim(std::string_view(assignment).substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
  if (!is_known_key(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = trim(value);
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const auto v = parse_as<double>(get(key));
  if (!v || !std::isfinite(*v)) throw ConfigError(key + ": expected a finite number, got '" + get(key) + "'");
  return *v;
}

std::int64_t Config::get_int(const std::string& key) const {
  const auto v = parse_as<std::int64_t>(get(key));
  if (!v) throw ConfigError(key + ": expected an integer, got '" + get(key) + "'");
  return *v;
}

std::uint64_t Config::get_uint(const std::string& key) const {
  const auto v = parse_as<std::uint64_t>(get(key));
  if (!v) throw ConfigError(key + ": expected a non-negative integer, got '" + get(key) + "'");
  return *v;
}

bool Config::get_bool(const std::string& key) const {
  const auto v = parse_bool(get(key));
  if (!v) throw ConfigError(key + ": expected true or false, got '" + get(key) + "'");
  return *v;
}

std::vector<std::string> Config::get_list(const std::string& key) const {
  return split_list(get(key));
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

RunSettings resolve(const Config& cfg) {
  Problems problems;
  RunSettings s;
  // Each conversion is attempted independently so that every bad value is reported.
  auto attempt = [&](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.add(e.what());
    } catch (const ContractViolation& e) {
      problems.add(e.what());
    }
  };
  auto positive = [&](const char* key, std::uint64_t v) {
    if (v == 0) problems.add(std::string(key) + ": must be positive");
  };

  attempt([&] { s.data.path = cfg.get("data.path"); });
  attempt([&] { s.data.limit_bytes = cfg.get_uint("data.limit_bytes"); });
  attempt([&] { s.data.synthetic_bytes = cfg.get_uint("data.synthetic_bytes"); });
  attempt([&] { s.data.val_fraction = cfg.get_double("data.val_fraction"); });
  attempt([&] { s.data.calib_fraction = cfg.get_double("data.calib_fraction"); });
  attempt([&] { s.data.seed = cfg.get_uint("data.seed"); });
  if (s.data.path.empty() && s.data.synthetic_bytes == 0) {
    problems.add("data: set data.path or data.synthetic_bytes");
  }
  if (!(s.data.val_fraction > 0.0) || !(s.data.calib_fraction > 0.0) ||
      !(s.data.val_fraction + s.data.calib_fraction < 1.0)) {
    problems.add("data: val_fraction and calib_fraction must be positive and sum below 1");
  }

  attempt([&] { s.model.seq_len = cfg.get_uint("data.seq_len"); });
  attempt([&] { s.model.d_model = cfg.get_uint("model.d_model"); });
  attempt([&] { s.model.n_layers = cfg.get_uint("model.n_layers"); });
  attempt([&] { s.model.n_heads = cfg.get_uint("model.n_heads"); });
  attempt([&] { s.model.d_ff = cfg.get_uint("model.d_ff"); });
  attempt([&] { s.model.init_seed = cfg.get_uint("model.init_seed"); });
  attempt([&] { s.model.init_std = cfg.get_double("model.init_std"); });
  s.model.vocab = data::kByteVocab;
  attempt([&] { s.model.validate(); });

  attempt([&] { s.optim.variant = optim::parse_variant(cfg.get("optim.variant")); });
  attempt([&] { s.optim.peak_lr = cfg.get_double("optim.peak_lr"); });
  attempt([&] { s.optim.beta1 = cfg.get_double("optim.beta1"); });
  attempt([&] { s.optim.beta2 = cfg.get_double("optim.beta2"); });
  attempt([&] { s.optim.eps = cfg.get_double("optim.eps"); });
  attempt([&] { s.optim.weight_decay = cfg.get_double("optim.weight_decay"); });
  attempt([&] { s.optim.clip_norm = cfg.get_double("optim.clip_norm"); });
  attempt([&] { s.optim.decoupled_wd = cfg.get_bool("optim.decoupled_wd"); });
  attempt([&] { s.optim.validate(); });

  attempt([&] {
    s.schedule = optim::ScheduleSpec::from_fractions(
        optim::parse_schedule_kind(cfg.get("schedule.kind")), cfg.get_uint("schedule.total_steps"),
        cfg.get_double("schedule.warmup_frac"), cfg.get_double("schedule.decay_frac"),
        cfg.get_double("schedule.min_lr"));
    s.schedule.validate();
  });

  attempt([&] { s.train.plan.batch_size = cfg.get_uint("train.batch_size"); });
  attempt([&] { s.train.plan.micro_batch_size = cfg.get_uint("train.micro_batch_size"); });
  s.train.plan.seq_len = s.model.seq_len;
  attempt([&] { s.train.ckpt_interval = cfg.get_uint("train.ckpt_interval"); });
  positive("train.batch_size", s.train.plan.batch_size);
  positive("train.micro_batch_size", s.train.plan.micro_batch_size);
  positive("train.ckpt_interval", s.train.ckpt_interval);

  attempt([&] { s.eval.batches = cfg.get_uint("eval.batches"); });
  attempt([&] { s.eval.batch_size = cfg.get_uint("eval.batch_size"); });
  attempt([&] { s.eval.interval = cfg.get_uint("eval.interval"); });
  positive("eval.batches", s.eval.batches);
  positive("eval.batch_size", s.eval.batch_size);
  positive("eval.interval", s.eval.interval);

  attempt([&] {
    for (const auto& b : cfg.get_list("quant.bits")) {
      const auto v = parse_as<unsigned>(b);
      if (!v || *v < 2 || *v > 8) throw ConfigError("quant.bits: '" + b + "' is not in 2..8");
      s.quant.bits.push_back(*v);
    }
    if (s.quant.bits.empty()) throw ConfigError("quant.bits: empty list");
  });
  attempt([&] { s.quant.base.method = quant::parse_method(cfg.get("quant.method")); });
  attempt([&] { s.quant.base.group_size = cfg.get_uint("quant.group_size"); });
  attempt([&] { s.quant.base.damping_frac = cfg.get_double("quant.damping_frac"); });
  attempt([&] { s.quant.base.propagate_quantized = cfg.get_bool("quant.propagate"); });
  attempt([&] {
    const auto& g = cfg.get("quant.group_stats");
    if (g == "compensated") {
      s.quant.base.group_stats = quant::GroupStats::kCompensated;
    } else if (g == "original") {
      s.quant.base.group_stats = quant::GroupStats::kOriginal;
    } else {
      throw ConfigError("quant.group_stats: expected compensated or original, got '" + g + "'");
    }
  });
  attempt([&] { s.quant.calib_samples = cfg.get_uint("quant.calib_samples"); });
  attempt([&] { s.quant.base.validate(); });
  positive("quant.calib_samples", s.quant.calib_samples);

  attempt([&] { s.lawa.k = cfg.get_uint("lawa.k"); });
  attempt([&] { s.lawa.interval = cfg.get_uint("lawa.interval"); });
  positive("lawa.k", s.lawa.k);
  positive("lawa.interval", s.lawa.interval);

  attempt([&] { s.branch.parent_run = cfg.get("branch.parent_run"); });
  attempt([&] { s.branch.step = cfg.get_uint("branch.step"); });
  attempt([&] { s.branch.decay_frac = cfg.get_double("branch.decay_frac"); });
  if (!(s.branch.decay_frac >= 0.0)) problems.add("branch.decay_frac: must be non-negative");

  problems.raise_if_any("invalid configuration:");
  return s;
}

}  // namespace qlab::config
