#include "qlab/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "qlab/error.hpp"
#include "qlab/fnv.hpp"

namespace qlab {

std::string to_hex(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace qlab

namespace qlab::data {

TokenStream load_corpus(const std::filesystem::path& path, std::optional<std::size_t> limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open corpus file: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IngestionError("corpus file is empty: " + path.string());
  if (limit && *limit < bytes.size()) bytes.resize(*limit);
  TokenStream s;
  s.tokens.reserve(bytes.size());
  for (char c : bytes) s.tokens.push_back(static_cast<std::uint8_t>(c));
  s.source = {{0, s.tokens.size()}};
  return s;
}

TokenStream stream_from_bytes(std::span<const std::uint8_t> bytes) {
  TokenStream s;
  s.tokens.assign(bytes.begin(), bytes.end());
  s.source = {{0, s.tokens.size()}};
  return s;
}

namespace {

TokenStream slice(const TokenStream& s, std::size_t begin, std::size_t end) {
  TokenStream out;
  out.vocab = s.vocab;
  out.tokens.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                    s.tokens.begin() + static_cast<std::ptrdiff_t>(end));
  // Map stream positions back to corpus ranges.
  std::size_t pos = 0;
  for (const IndexRange& r : s.source) {
    const std::size_t lo = std::max(begin, pos);
    const std::size_t hi = std::min(end, pos + r.size());
    if (lo < hi) out.source.push_back({r.begin + (lo - pos), r.begin + (hi - pos)});
    pos += r.size();
  }
  return out;
}

void append(TokenStream& dst, const TokenStream& src) {
  dst.tokens.insert(dst.tokens.end(), src.tokens.begin(), src.tokens.end());
  dst.source.insert(dst.source.end(), src.source.begin(), src.source.end());
}

}  // namespace

Splits split(const TokenStream& stream, double val_fraction, double calib_fraction,
             std::uint64_t seed) {
  if (!(val_fraction > 0.0) || !(calib_fraction > 0.0) || !(val_fraction + calib_fraction < 1.0)) {
    throw ConfigError("split: fractions must be positive and sum below 1 (got val=" +
                      std::to_string(val_fraction) + ", calib=" + std::to_string(calib_fraction) +
                      ")");
  }
  const std::size_t n = stream.size();
  const auto nv = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  const auto nc = static_cast<std::size_t>(std::llround(static_cast<double>(n) * calib_fraction));
  if (nv == 0 || nc == 0 || nv + nc >= n) {
    throw ConfigError("split: stream of " + std::to_string(n) + " tokens too short for fractions");
  }
  const std::size_t slack = n - nv - nc;
  std::mt19937_64 rng(seed);
  const std::size_t offset = static_cast<std::size_t>(rng() % (slack + 1));

  Splits out;
  out.val = slice(stream, offset, offset + nv);
  out.calib = slice(stream, offset + nv, offset + nv + nc);
  out.train = slice(stream, 0, offset);
  append(out.train, slice(stream, offset + nv + nc, n));
  return out;
}

std::size_t windows_per_epoch(const TokenStream& stream, std::size_t seq_len) {
  if (seq_len == 0 || stream.size() < 2) return 0;
  return (stream.size() - 1) / seq_len;
}

std::optional<Batch> next_batch(const TokenStream& stream, std::size_t batch, std::size_t seq_len,
                                BatchCursor& cursor, bool wrap) {
  const std::size_t per_epoch = windows_per_epoch(stream, seq_len);
  if (batch == 0 || per_epoch == 0) {
    throw ContractViolation("next_batch: stream of " + std::to_string(stream.size()) +
                            " tokens cannot supply windows of " + std::to_string(seq_len));
  }
  if (!wrap && cursor.windows_consumed + batch > per_epoch) return std::nullopt;

  Batch b;
  b.batch = batch;
  b.seq_len = seq_len;
  b.inputs.resize(batch * seq_len);
  b.targets.resize(batch * seq_len);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t w = static_cast<std::size_t>((cursor.windows_consumed + i) % per_epoch);
    const std::size_t start = w * seq_len;
    for (std::size_t j = 0; j < seq_len; ++j) {
      b.inputs[i * seq_len + j] = stream.tokens[start + j];
      b.targets[i * seq_len + j] = stream.tokens[start + j + 1];
    }
  }
  cursor.windows_consumed += batch;
  return b;
}

std::vector<Batch> fixed_batches(const TokenStream& stream, std::size_t sequences,
                                 std::size_t batch_size, std::size_t seq_len) {
  const std::size_t available = windows_per_epoch(stream, seq_len);
  std::size_t remaining = std::min(sequences, available);
  std::vector<Batch> out;
  BatchCursor cursor;
  while (remaining > 0) {
    const std::size_t n = std::min(batch_size, remaining);
    out.push_back(*next_batch(stream, n, seq_len, cursor, /*wrap=*/false));
    remaining -= n;
  }
  return out;
}

CalibrationSet make_calibration(const TokenStream& calib, std::size_t samples, std::size_t seq_len,
                                std::size_t batch_size) {
  CalibrationSet set;
  set.batches = fixed_batches(calib, samples, batch_size, seq_len);
  for (const Batch& b : set.batches) set.sample_count += b.batch;
  return set;
}

std::uint64_t content_hash(std::span<const Batch> batches) {
  Fnv1a h;
  for (const Batch& b : batches) {
    const std::uint64_t dims[2] = {b.batch, b.seq_len};
    h.update({reinterpret_cast<const std::uint8_t*>(dims), sizeof(dims)});
    h.update({reinterpret_cast<const std::uint8_t*>(b.inputs.data()),
              b.inputs.size() * sizeof(TokenId)});
    h.update({reinterpret_cast<const std::uint8_t*>(b.targets.data()),
              b.targets.size() * sizeof(TokenId)});
  }
  return h.digest();
}

}  // namespace qlab::data
