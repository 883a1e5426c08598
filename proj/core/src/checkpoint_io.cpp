#include "qlab/checkpoint_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "qlab/error.hpp"
#include "qlab/fnv.hpp"

static_assert(std::endian::native == std::endian::little,
              "QLAB1 payloads are little-endian; add byte swapping for this platform");

namespace qlab::io {

namespace {

constexpr std::string_view kMagic = "QLAB1";

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

template <class U>
U parse_number(const std::string& s, const std::string& what) {
  U v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw FormatError("cannot parse " + what + " from '" + s + "'");
  }
  return v;
}

template <class T>
std::vector<std::uint8_t> raw_bytes(std::span<const T> xs) {
  std::vector<std::uint8_t> out(xs.size() * sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), xs.data(), out.size());
  return out;
}

template <class T>
nd::BasicMatrix<T> matrix_from(const TensorRecord& r) {
  std::vector<T> data(r.rows * r.cols);
  if (r.bytes.size() != data.size() * sizeof(T)) throw FormatError("tensor " + r.name + ": size");
  if (!data.empty()) std::memcpy(data.data(), r.bytes.data(), r.bytes.size());
  return nd::BasicMatrix<T>(r.rows, r.cols, std::move(data));
}

}  // namespace

void put_model_config(TensorFile& f, const model::ModelConfig& c) {
  f.meta.emplace_back("model.vocab", std::to_string(c.vocab));
  f.meta.emplace_back("model.d_model", std::to_string(c.d_model));
  f.meta.emplace_back("model.n_layers", std::to_string(c.n_layers));
  f.meta.emplace_back("model.n_heads", std::to_string(c.n_heads));
  f.meta.emplace_back("model.d_ff", std::to_string(c.d_ff));
  f.meta.emplace_back("model.seq_len", std::to_string(c.seq_len));
  f.meta.emplace_back("model.init_seed", std::to_string(c.init_seed));
  f.meta.emplace_back("model.init_std", format_double(c.init_std));
}

model::ModelConfig model_config_from(const TensorFile& f) {
  model::ModelConfig c;
  auto sz = [&](const char* k) { return parse_number<std::size_t>(f.meta_value(k), k); };
  c.vocab = sz("model.vocab");
  c.d_model = sz("model.d_model");
  c.n_layers = sz("model.n_layers");
  c.n_heads = sz("model.n_heads");
  c.d_ff = sz("model.d_ff");
  c.seq_len = sz("model.seq_len");
  c.init_seed = parse_number<std::uint64_t>(f.meta_value("model.init_seed"), "model.init_seed");
  c.init_std = parse_number<double>(f.meta_value("model.init_std"), "model.init_std");
  return c;
}

const std::string& TensorFile::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw FormatError("missing metadata key '" + key + "'");
}

bool TensorFile::has_meta(const std::string& key) const {
  return std::any_of(meta.begin(), meta.end(), [&](const auto& kv) { return kv.first == key; });
}

const TensorRecord& TensorFile::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("missing tensor '" + name + "'");
}

std::size_t payload_size(const std::string& dtype, std::size_t rows, std::size_t cols) {
  if (dtype == "f32") return rows * cols * 4;
  if (dtype == "f64") return rows * cols * 8;
  if (dtype == "u8") return rows * cols;
  if (dtype.size() == 3 && dtype[0] == 'u' && dtype[2] == 'p' && dtype[1] >= '2' && dtype[1] <= '8') {
    return rows * quant::packed_row_bytes(cols, static_cast<unsigned>(dtype[1] - '0'));
  }
  throw FormatError("unknown dtype '" + dtype + "'");
}

std::vector<std::uint8_t> encode(const TensorFile& file) {
  std::string header(kMagic);
  header += '\n';
  for (const auto& [k, v] : file.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractViolation("metadata key/value contains whitespace: " + k);
    }
    header += "@" + k + " " + v + "\n";
  }
  std::size_t offset = 0;
  for (const auto& t : file.tensors) {
    if (t.name.empty() || t.name.find_first_of(" \n@") != std::string::npos) {
      throw ContractViolation("invalid tensor name '" + t.name + "'");
    }
    const std::size_t n = payload_size(t.dtype, t.rows, t.cols);
    if (n != t.bytes.size()) {
      throw ContractViolation("tensor " + t.name + ": payload has " + std::to_string(t.bytes.size()) +
                              " bytes, dtype/shape imply " + std::to_string(n));
    }
    header += t.name + " " + t.dtype + " " + std::to_string(t.rows) + " " +
              std::to_string(t.cols) + " " + std::to_string(offset) + "\n";
    offset += n;
  }
  header += "\n";

  std::vector<std::uint8_t> out(header.begin(), header.end());
  const std::size_t payload_start = out.size();
  out.reserve(payload_start + offset + 17);
  for (const auto& t : file.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  const std::uint64_t checksum =
      fnv1a({out.data() + payload_start, out.size() - payload_start});
  const std::string footer = to_hex(checksum) + "\n";
  out.insert(out.end(), footer.begin(), footer.end());
  return out;
}

TensorFile decode(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto* begin = bytes.data() + pos;
    const auto* end = static_cast<const std::uint8_t*>(std::memchr(begin, '\n', bytes.size() - pos));
    if (!end) throw FormatError("truncated header");
    std::string line(reinterpret_cast<const char*>(begin), static_cast<std::size_t>(end - begin));
    pos += line.size() + 1;
    return line;
  };
  if (next_line() != kMagic) throw FormatError("not a QLAB1 file");

  TensorFile f;
  std::vector<std::size_t> offsets;
  for (;;) {
    const std::string line = next_line();
    if (line.empty()) break;
    if (line[0] == '@') {
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw FormatError("bad metadata line: " + line);
      f.meta.emplace_back(line.substr(1, sp - 1), line.substr(sp + 1));
      continue;
    }
    std::istringstream ls(line);
    TensorRecord t;
    std::string rows, cols, off;
    if (!(ls >> t.name >> t.dtype >> rows >> cols >> off)) {
      throw FormatError("bad tensor line: " + line);
    }
    t.rows = parse_number<std::size_t>(rows, "rows");
    t.cols = parse_number<std::size_t>(cols, "cols");
    offsets.push_back(parse_number<std::size_t>(off, "byte_offset"));
    f.tensors.push_back(std::move(t));
  }

  const std::size_t payload_start = pos;
  std::size_t expected = 0;
  for (std::size_t i = 0; i < f.tensors.size(); ++i) {
    auto& t = f.tensors[i];
    if (offsets[i] != expected) throw FormatError("tensor " + t.name + ": unexpected byte offset");
    const std::size_t n = payload_size(t.dtype, t.rows, t.cols);
    if (payload_start + expected + n > bytes.size()) throw FormatError("truncated payload");
    const auto* src = bytes.data() + payload_start + expected;
    t.bytes.assign(src, src + n);
    expected += n;
  }
  if (bytes.size() != payload_start + expected + 17) {
    throw FormatError("file size does not match header (missing or extra footer bytes)");
  }
  const std::string footer(reinterpret_cast<const char*>(bytes.data() + payload_start + expected), 17);
  if (footer.back() != '\n') throw FormatError("malformed footer");
  const std::uint64_t actual = fnv1a(bytes.subspan(payload_start, expected));
  if (footer.substr(0, 16) != to_hex(actual)) {
    throw FormatError("checksum mismatch: footer " + footer.substr(0, 16) + ", payload " +
                      to_hex(actual));
  }
  return f;
}

void write_file(const std::filesystem::path& path, const TensorFile& file) {
  const auto bytes = encode(file);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorFile read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

TensorFile to_file(const model::Checkpoint& ckpt) {
  TensorFile f;
  f.meta.emplace_back("kind", "checkpoint");
  f.meta.emplace_back("step", std::to_string(ckpt.step));
  f.meta.emplace_back("tokens_seen", std::to_string(ckpt.tokens_seen));
  put_model_config(f, ckpt.config);
  for (const auto& spec : model::tensor_layout(ckpt.config)) {
    const auto& m = ckpt.at(spec.name);
    f.tensors.push_back({spec.name, "f32", m.rows(), m.cols(), raw_bytes<float>(m.data())});
  }
  return f;
}

model::Checkpoint checkpoint_from_file(const TensorFile& f) {
  model::Checkpoint c;
  c.config = model_config_from(f);
  c.step = parse_number<std::uint64_t>(f.meta_value("step"), "step");
  c.tokens_seen = parse_number<std::uint64_t>(f.meta_value("tokens_seen"), "tokens_seen");
  for (const auto& t : f.tensors) {
    if (t.dtype != "f32") throw FormatError("checkpoint tensor " + t.name + " is not f32");
    c.tensors.emplace(t.name, matrix_from<float>(t));
  }
  try {
    model::validate_checkpoint(c);
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("checkpoint does not match its config: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const model::Checkpoint& ckpt) {
  write_file(path, to_file(ckpt));
}

model::Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_file(read_file(path));
}

void save_optimizer_state(const std::filesystem::path& path, const optim::OptimState& state,
                          const data::BatchCursor& cursor) {
  TensorFile f;
  f.meta.emplace_back("kind", "optimizer");
  f.meta.emplace_back("t", std::to_string(state.t));
  f.meta.emplace_back("data_cursor", std::to_string(cursor.windows_consumed));
  for (const char* prefix : {"m", "v"}) {
    const auto& moments = prefix[0] == 'm' ? state.m : state.v;
    for (const auto& [name, m] : moments) {
      f.tensors.push_back({std::string(prefix) + "." + name, "f32", m.rows(), m.cols(),
                           raw_bytes<float>(m.data())});
    }
  }
  write_file(path, f);
}

std::pair<optim::OptimState, data::BatchCursor> load_optimizer_state(
    const std::filesystem::path& path) {
  const TensorFile f = read_file(path);
  optim::OptimState s;
  s.t = parse_number<std::uint64_t>(f.meta_value("t"), "t");
  data::BatchCursor cursor;
  cursor.windows_consumed = parse_number<std::uint64_t>(f.meta_value("data_cursor"), "data_cursor");
  for (const auto& t : f.tensors) {
    if (t.name.starts_with("m.")) {
      s.m.emplace(t.name.substr(2), matrix_from<float>(t));
    } else if (t.name.starts_with("v.")) {
      s.v.emplace(t.name.substr(2), matrix_from<float>(t));
    } else {
      throw FormatError("unexpected optimizer tensor " + t.name);
    }
  }
  return {std::move(s), cursor};
}

std::filesystem::path optimizer_path_for(const std::filesystem::path& ckpt_path) {
  auto p = ckpt_path;
  p.replace_extension(".opt.qlab");
  return p;
}

}  // namespace qlab::io
