#pragma once

// Byte-level corpus ingestion, deterministic splitting and sequential batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qlab::data {

using TokenId = std::uint16_t;

inline constexpr std::size_t kByteVocab = 256;

/// Half-open index range [begin, end) into the original corpus.
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct TokenStream {
  std::vector<TokenId> tokens;
  std::size_t vocab = kByteVocab;
  /// Where these tokens came from in the source corpus, in stream order.
  std::vector<IndexRange> source;

  std::size_t size() const noexcept { return tokens.size(); }
};

/// One training or evaluation batch; `targets` are `inputs` shifted by one token.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> inputs;   // row-major [batch, seq_len]
  std::vector<TokenId> targets;  // row-major [batch, seq_len]

  std::size_t positions() const noexcept { return batch * seq_len; }
};

struct CalibrationSet {
  std::vector<Batch> batches;
  std::size_t sample_count = 0;  // sequences
};

struct Splits {
  TokenStream train;
  TokenStream val;
  TokenStream calib;
};

/// Reads a file as byte-level tokens, at most `limit` bytes when given.
/// Throws IngestionError for a missing or empty file.
TokenStream load_corpus(const std::filesystem::path& path,
                        std::optional<std::size_t> limit = std::nullopt);

/// Wraps in-memory bytes as a stream (tests, synthetic corpora).
TokenStream stream_from_bytes(std::span<const std::uint8_t> bytes);

/// Cuts a held-out block (validation followed by calibration) out of the stream
/// at a seed-determined offset; train is everything else. Fractions must be
/// positive and sum below one (ConfigError otherwise).
Splits split(const TokenStream& stream, double val_fraction, double calib_fraction,
             std::uint64_t seed);

/// Position in the window sequence of a stream. Window i covers tokens
/// [i*seq_len, i*seq_len + seq_len] (seq_len + 1 tokens incl. the last target).
struct BatchCursor {
  std::uint64_t windows_consumed = 0;
  friend bool operator==(const BatchCursor&, const BatchCursor&) = default;
};

/// Number of non-overlapping windows in one epoch: floor((N - 1) / seq_len).
std::size_t windows_per_epoch(const TokenStream& stream, std::size_t seq_len);

/// Next `batch` sequential windows. With `wrap`, the epoch restarts at window 0;
/// without it, returns nullopt once the epoch cannot supply a full batch.
std::optional<Batch> next_batch(const TokenStream& stream, std::size_t batch,
                                std::size_t seq_len, BatchCursor& cursor, bool wrap = true);

/// The first `sequences` windows of a stream grouped into batches of `batch_size`.
/// Requests beyond one epoch are capped at the available windows.
std::vector<Batch> fixed_batches(const TokenStream& stream, std::size_t sequences,
                                 std::size_t batch_size, std::size_t seq_len);

CalibrationSet make_calibration(const TokenStream& calib, std::size_t samples,
                                std::size_t seq_len, std::size_t batch_size = 8);

/// FNV-1a over the batch contents; identifies an evaluation set.
std::uint64_t content_hash(std::span<const Batch> batches);

}  // namespace qlab::data
