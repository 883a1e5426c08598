#pragma once

// QLAB1 tensor container.
//
//   QLAB1\n
//   @<key> <value>\n                      (zero or more metadata lines)
//   <name> <dtype> <rows> <cols> <byte_offset>\n   (one per tensor, payload order)
//   \n
//   <payload bytes, little-endian>
//   <16 hex digits: FNV-1a 64 of the payload>\n
//
// dtypes: f32, f64, u8, and u<b>p for bit-packed codes (b = 2..8, each row padded
// to a byte boundary).

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qlab/data.hpp"
#include "qlab/model.hpp"
#include "qlab/optim.hpp"
#include "qlab/quant.hpp"

namespace qlab::io {

struct TensorRecord {
  std::string name;
  std::string dtype;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bytes;
};

struct TensorFile {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<TensorRecord> tensors;

  const std::string& meta_value(const std::string& key) const;
  bool has_meta(const std::string& key) const;
  const TensorRecord& tensor(const std::string& name) const;
};

/// Bytes a tensor of this dtype and shape occupies. Throws FormatError for unknown dtypes.
std::size_t payload_size(const std::string& dtype, std::size_t rows, std::size_t cols);

/// Serializes to bytes (header, payload, checksum footer).
std::vector<std::uint8_t> encode(const TensorFile& file);

/// Parses and verifies the checksum. Throws FormatError on any mismatch.
TensorFile decode(std::span<const std::uint8_t> bytes);

/// Writes via a temporary file and rename.
void write_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_file(const std::filesystem::path& path);

/// Model configuration as @model.* metadata, shared by checkpoints and quantized models.
void put_model_config(TensorFile& file, const model::ModelConfig& cfg);
model::ModelConfig model_config_from(const TensorFile& file);

TensorFile to_file(const model::Checkpoint& ckpt);
model::Checkpoint checkpoint_from_file(const TensorFile& file);

void save_checkpoint(const std::filesystem::path& path, const model::Checkpoint& ckpt);
model::Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Optimizer moments plus the data cursor needed for bit-exact resume.
void save_optimizer_state(const std::filesystem::path& path, const optim::OptimState& state,
                          const data::BatchCursor& cursor);
std::pair<optim::OptimState, data::BatchCursor> load_optimizer_state(
    const std::filesystem::path& path);

void save_quantized(const std::filesystem::path& path, const quant::QuantizedModel& qm);
quant::QuantizedModel load_quantized(const std::filesystem::path& path);

/// Sibling optimizer-state path for a checkpoint: ckpt_100.qlab → ckpt_100.opt.qlab
std::filesystem::path optimizer_path_for(const std::filesystem::path& ckpt_path);

}  // namespace qlab::io
