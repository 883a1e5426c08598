#include "qlab/metrics_csv.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>

#include "qlab/error.hpp"

namespace qlab::csv {

namespace {

using metrics::MetricRecord;

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<double> parse_real(const std::string& s, const std::string& column) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw FormatError("column " + column + ": cannot parse '" + s + "'");
  }
  return v;
}

std::uint64_t parse_count(const std::string& s, const std::string& column) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw FormatError("column " + column + ": cannot parse '" + s + "'");
  }
  return v;
}

std::string opt(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

std::string at_bits(const std::map<unsigned, double>& m, unsigned bits) {
  auto it = m.find(bits);
  return it == m.end() ? std::string() : format_real(it->second);
}

void put_bits(std::map<unsigned, double>& m, unsigned bits, const std::optional<double>& v) {
  if (v) m[bits] = *v;
}

// Serializes every field to text so comparisons match what a reader would see.
std::vector<std::string> cells(const MetricRecord& r) { return split_commas(to_line(r)); }

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << content;
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Exclusive lock on `<path>.lock`, plus an in-process mutex (flock is per open file).
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) : guard_(mutex()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string lock_path = path.string() + ".lock";
    fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw FormatError("cannot open lock file " + lock_path);
    ::flock(fd_, LOCK_EX);
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  std::lock_guard<std::mutex> guard_;
  int fd_ = -1;
};

}  // namespace

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {
      "run_id",     "step",       "tokens_seen", "lr",          "train_loss",
      "val_ce_fp",  "val_ce_q3",  "val_ce_q4",   "rel_ce_err3", "rel_ce_err4",
      "delta_ptq3", "delta_ptq4", "acc_fp",      "acc_q3",      "acc_q4",
      "rel_acc_drop3", "rel_acc_drop4", "grad_norm", "weight_norm"};
  return cols;
}

std::string header_line() {
  std::string out;
  for (const auto& c : metric_columns()) out += (out.empty() ? "" : ",") + c;
  return out;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string to_line(const MetricRecord& r) {
  if (r.run_id.find_first_of(",\n") != std::string::npos) {
    throw ContractViolation("run_id must not contain commas or newlines");
  }
  const std::vector<std::string> fields = {
      r.run_id,
      std::to_string(r.step),
      std::to_string(r.tokens_seen),
      opt(r.lr),
      opt(r.train_loss),
      opt(r.val_ce_fp),
      at_bits(r.val_ce_q, 3),
      at_bits(r.val_ce_q, 4),
      at_bits(r.rel_ce_err, 3),
      at_bits(r.rel_ce_err, 4),
      at_bits(r.delta_ptq, 3),
      at_bits(r.delta_ptq, 4),
      opt(r.acc_fp),
      at_bits(r.acc_q, 3),
      at_bits(r.acc_q, 4),
      at_bits(r.rel_acc_drop, 3),
      at_bits(r.rel_acc_drop, 4),
      opt(r.grad_norm),
      opt(r.weight_norm),
  };
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += fields[i];
  }
  return out;
}

MetricRecord parse_line(const std::string& line) {
  const auto f = split_commas(line);
  const auto& cols = metric_columns();
  if (f.size() != cols.size()) {
    throw FormatError("metrics row has " + std::to_string(f.size()) + " fields, expected " +
                      std::to_string(cols.size()));
  }
  MetricRecord r;
  r.run_id = f[0];
  r.step = parse_count(f[1], cols[1]);
  r.tokens_seen = parse_count(f[2], cols[2]);
  r.lr = parse_real(f[3], cols[3]);
  r.train_loss = parse_real(f[4], cols[4]);
  r.val_ce_fp = parse_real(f[5], cols[5]);
  put_bits(r.val_ce_q, 3, parse_real(f[6], cols[6]));
  put_bits(r.val_ce_q, 4, parse_real(f[7], cols[7]));
  put_bits(r.rel_ce_err, 3, parse_real(f[8], cols[8]));
  put_bits(r.rel_ce_err, 4, parse_real(f[9], cols[9]));
  put_bits(r.delta_ptq, 3, parse_real(f[10], cols[10]));
  put_bits(r.delta_ptq, 4, parse_real(f[11], cols[11]));
  r.acc_fp = parse_real(f[12], cols[12]);
  put_bits(r.acc_q, 3, parse_real(f[13], cols[13]));
  put_bits(r.acc_q, 4, parse_real(f[14], cols[14]));
  put_bits(r.rel_acc_drop, 3, parse_real(f[15], cols[15]));
  put_bits(r.rel_acc_drop, 4, parse_real(f[16], cols[16]));
  r.grad_norm = parse_real(f[17], cols[17]);
  r.weight_norm = parse_real(f[18], cols[18]);
  return r;
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return {};
  std::string line;
  if (!std::getline(in, line)) return {};
  if (line != header_line()) throw FormatError(path.string() + ": unexpected metrics header");
  std::vector<MetricRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(parse_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_metrics(const std::filesystem::path& path, std::vector<MetricRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return a.run_id != b.run_id ? a.run_id < b.run_id : a.step < b.step;
  });
  std::string content = header_line() + "\n";
  for (const auto& r : records) content += to_line(r) + "\n";
  write_atomically(path, content);
}

MetricRecord merge_records(const MetricRecord& a, const MetricRecord& b) {
  if (a.run_id != b.run_id || a.step != b.step) {
    throw ContractViolation("merge_records: keys differ");
  }
  const auto ca = cells(a);
  const auto cb = cells(b);
  const auto& cols = metric_columns();
  std::string merged;
  for (std::size_t i = 0; i < ca.size(); ++i) {
    const std::string* pick = &ca[i];
    if (ca[i].empty()) {
      pick = &cb[i];
    } else if (!cb[i].empty() && ca[i] != cb[i]) {
      throw MergeConflict("run " + a.run_id + " step " + std::to_string(a.step) + ": column " +
                          cols[i] + " differs (" + ca[i] + " vs " + cb[i] + ")");
    }
    if (i) merged += ',';
    merged += *pick;
  }
  return parse_line(merged);
}

void merge_into(const std::filesystem::path& path, const std::vector<MetricRecord>& records) {
  FileLock lock(path);
  std::map<std::pair<std::string, std::uint64_t>, MetricRecord> rows;
  for (auto& r : read_metrics(path)) {
    const auto key = std::make_pair(r.run_id, r.step);
    auto [it, fresh] = rows.try_emplace(key, r);
    if (!fresh) it->second = merge_records(it->second, r);
  }
  for (const auto& r : records) {
    const auto key = std::make_pair(r.run_id, r.step);
    auto [it, fresh] = rows.try_emplace(key, parse_line(to_line(r)));
    if (!fresh) it->second = merge_records(it->second, r);
  }
  std::vector<MetricRecord> out;
  out.reserve(rows.size());
  for (auto& [_, r] : rows) out.push_back(std::move(r));
  write_metrics(path, std::move(out));
}

void truncate_after(const std::filesystem::path& path, const std::string& run_id,
                    std::uint64_t step) {
  FileLock lock(path);
  auto rows = read_metrics(path);
  std::erase_if(rows, [&](const MetricRecord& r) { return r.run_id == run_id && r.step > step; });
  write_metrics(path, std::move(rows));
}

std::size_t Table::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw FormatError("missing column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

Table read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw FormatError(path.string() + ": empty CSV");
  t.columns = split_commas(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split_commas(line);
    if (row.size() != t.columns.size()) {
      throw FormatError(path.string() + ": row with " + std::to_string(row.size()) +
                        " fields, header has " + std::to_string(t.columns.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_table(const std::filesystem::path& path, const Table& table) {
  std::ostringstream out;
  auto put = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  };
  put(table.columns);
  for (const auto& r : table.rows) put(r);
  write_atomically(path, out.str());
}

}  // namespace qlab::csv
