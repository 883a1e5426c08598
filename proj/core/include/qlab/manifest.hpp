#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qlab/config.hpp"

namespace qlab::manifest {

struct ParentRef {
  std::string run_id;
  std::uint64_t branch_step = 0;
  friend bool operator==(const ParentRef&, const ParentRef&) = default;
};

struct RunManifest {
  std::string run_id;
  config::Config config;
  std::optional<ParentRef> parent;
  std::string created;       // UTC, ISO 8601
  std::string code_version;
  /// Recorded facts that are not inputs: content hashes, fixed design choices.
  std::map<std::string, std::string> info;
};

/// 16 hex digits of FNV-1a over the canonical config text and the parent reference.
std::string compute_run_id(const config::Config& cfg, const std::optional<ParentRef>& parent);

/// Fills run_id, created and code_version.
RunManifest make_manifest(const config::Config& cfg, std::optional<ParentRef> parent);

std::string code_version();

void write_manifest(const std::filesystem::path& run_dir, const RunManifest& m);
/// Throws FormatError when missing or malformed, or when the stored run_id does
/// not match the recomputed one.
RunManifest read_manifest(const std::filesystem::path& run_dir);

inline constexpr const char* kManifestFile = "manifest.txt";

/// Verifies that parent links among the given run directories form a forest:
/// no cycles and no run is its own ancestor. Parents outside the set are roots.
/// Throws FormatError describing the first cycle found.
void check_lineage(const std::vector<std::filesystem::path>& run_dirs);

/// The traversal behind check_lineage, over a child → parent run_id map.
void check_parent_links(const std::map<std::string, std::string>& parent_of);

}  // namespace qlab::manifest
