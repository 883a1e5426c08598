#pragma once

// Metrics CSV: one row per (run_id, step). Rows from training and from
// quantize-and-eval passes are merged field by field.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "qlab/metrics.hpp"

namespace qlab::csv {

/// Raised when two records for the same (run_id, step) disagree on a field.
class MergeConflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The fixed column list, in order.
const std::vector<std::string>& metric_columns();
std::string header_line();

/// %.9g
std::string format_real(double v);

std::string to_line(const metrics::MetricRecord& rec);
metrics::MetricRecord parse_line(const std::string& line);

/// Missing file → empty. Throws FormatError on a wrong header or malformed row.
std::vector<metrics::MetricRecord> read_metrics(const std::filesystem::path& path);

/// Rows sorted by (run_id, step); written via a temporary file and rename.
void write_metrics(const std::filesystem::path& path, std::vector<metrics::MetricRecord> records);

/// Field-wise union. A field present in both must serialize identically.
metrics::MetricRecord merge_records(const metrics::MetricRecord& a, const metrics::MetricRecord& b);

/// Read-merge-write under an exclusive per-file lock (threads and processes).
void merge_into(const std::filesystem::path& path,
                const std::vector<metrics::MetricRecord>& records);

/// Replaces all rows of `run_id` with step > `step` removed (used on resume).
void truncate_after(const std::filesystem::path& path, const std::string& run_id,
                    std::uint64_t step);

/// Generic header + string cells, for reporting.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  /// Throws FormatError naming the column when absent.
  std::size_t column(const std::string& name) const;
};

Table read_table(const std::filesystem::path& path);
void write_table(const std::filesystem::path& path, const Table& table);

}  // namespace qlab::csv
