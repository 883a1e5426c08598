#include "qlab/manifest.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "qlab/error.hpp"
#include "qlab/fnv.hpp"

#ifndef QLAB_VERSION
#define QLAB_VERSION "unknown"
#endif

namespace qlab::manifest {

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::string code_version() { return QLAB_VERSION; }

std::string compute_run_id(const config::Config& cfg, const std::optional<ParentRef>& parent) {
  std::string text = cfg.to_text();
  if (parent) text += "parent = " + parent->run_id + "@" + std::to_string(parent->branch_step) + "\n";
  Fnv1a h;
  h.update(text);
  return to_hex(h.digest());
}

RunManifest make_manifest(const config::Config& cfg, std::optional<ParentRef> parent) {
  RunManifest m;
  m.config = cfg;
  m.parent = std::move(parent);
  m.run_id = compute_run_id(cfg, m.parent);
  m.created = utc_now();
  m.code_version = code_version();
  return m;
}

void write_manifest(const std::filesystem::path& run_dir, const RunManifest& m) {
  std::filesystem::create_directories(run_dir);
  std::ostringstream out;
  out << "run_id = " << m.run_id << "\n";
  out << "created = " << m.created << "\n";
  out << "code_version = " << m.code_version << "\n";
  if (m.parent) {
    out << "parent.run_id = " << m.parent->run_id << "\n";
    out << "parent.branch_step = " << m.parent->branch_step << "\n";
  }
  for (const auto& [k, v] : m.config.values()) out << "config." << k << " = " << v << "\n";
  for (const auto& [k, v] : m.info) out << "info." << k << " = " << v << "\n";
  const auto path = run_dir / kManifestFile;
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << out.str();
    if (!f) throw FormatError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

RunManifest read_manifest(const std::filesystem::path& run_dir) {
  const auto path = run_dir / kManifestFile;
  std::ifstream in(path);
  if (!in) throw FormatError("no manifest in " + run_dir.string());
  RunManifest m;
  m.config = config::Config::defaults();
  std::string config_text;
  std::string line;
  ParentRef parent;
  bool has_parent = false;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": malformed line '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "run_id") {
      m.run_id = value;
    } else if (key == "created") {
      m.created = value;
    } else if (key == "code_version") {
      m.code_version = value;
    } else if (key == "parent.run_id") {
      parent.run_id = value;
      has_parent = true;
    } else if (key == "parent.branch_step") {
      parent.branch_step = std::stoull(value);
      has_parent = true;
    } else if (key.starts_with("config.")) {
      config_text += key.substr(7) + " = " + value + "\n";
    } else if (key.starts_with("info.")) {
      m.info[key.substr(5)] = value;
    } else {
      throw FormatError(path.string() + ": unknown manifest key '" + key + "'");
    }
  }
  try {
    m.config.merge_text(config_text, path.string());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  if (has_parent) m.parent = parent;
  if (m.run_id != compute_run_id(m.config, m.parent)) {
    throw FormatError(path.string() + ": run_id does not match the recorded configuration");
  }
  return m;
}

void check_lineage(const std::vector<std::filesystem::path>& run_dirs) {
  std::map<std::string, std::string> parent_of;
  for (const auto& dir : run_dirs) {
    const RunManifest m = read_manifest(dir);
    if (m.parent) parent_of[m.run_id] = m.parent->run_id;
  }
  check_parent_links(parent_of);
}

void check_parent_links(const std::map<std::string, std::string>& parent_of) {
  for (const auto& [start, _] : parent_of) {
    std::set<std::string> seen{start};
    for (auto it = parent_of.find(start); it != parent_of.end(); it = parent_of.find(it->second)) {
      if (!seen.insert(it->second).second) {
        throw FormatError("run lineage contains a cycle through " + it->second);
      }
    }
  }
}

}  // namespace qlab::manifest
