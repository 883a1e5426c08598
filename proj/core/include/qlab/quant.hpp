#pragma once

// Group-wise asymmetric integer quantization: RTN baseline and GPTQ with
// Hessian-based error compensation.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qlab/data.hpp"
#include "qlab/model.hpp"
#include "qlab/ndkernel.hpp"

namespace qlab::quant {

enum class Method { kRtn, kGptq };

std::string to_string(Method m);
Method parse_method(const std::string& s);

/// Where GPTQ takes the weights that define a group's grid.
enum class GroupStats {
  kCompensated,  // current error-compensated values when the group starts (reference behaviour)
  kOriginal,     // the unmodified input weights (ablation)
};

struct QuantConfig {
  unsigned bits = 4;
  std::size_t group_size = 128;
  double damping_frac = 0.01;
  bool propagate_quantized = true;
  Method method = Method::kGptq;
  GroupStats group_stats = GroupStats::kCompensated;

  /// Throws ConfigError unless 2 ≤ bits ≤ 8, group_size ≥ 1, 0 < damping_frac < 1.
  void validate() const;
  unsigned max_code() const noexcept { return (1u << bits) - 1u; }
};

/// Per-row grid of one column group.
struct GroupParams {
  std::vector<double> scale;
  std::vector<std::uint8_t> zero;
};

/// Asymmetric min-max grid per row over a range widened to include zero:
/// scale = (max − min)/(2ᵇ − 1), zero = round_half_up(−min·(2ᵇ − 1)/(max − min)).
/// A constant row c gets scale |c| (1 when c == 0) and zero 1 for c < 0, else 0,
/// which reproduces c exactly.
GroupParams group_params(nd::ConstView<double> w_group, unsigned bits);

/// clamp(floor(w/scale + 1/2) + zero, 0, 2ᵇ − 1)
std::uint8_t quantize_value(double w, double scale, std::uint8_t zero, unsigned bits);

inline double dequantize_value(std::uint8_t code, double scale, std::uint8_t zero) {
  return (static_cast<double>(code) - static_cast<double>(zero)) * scale;
}

/// Bytes per packed row of `cols` codes at `bits` each (rows padded to a byte boundary).
std::size_t packed_row_bytes(std::size_t cols, unsigned bits);

/// LSB-first little-endian bit packing of row-major codes; each row starts on a byte.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, std::size_t rows,
                                     std::size_t cols, unsigned bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t rows,
                                       std::size_t cols, unsigned bits);

/// One quantized weight matrix W [d_out, d_in].
class QuantizedLinear {
 public:
  QuantizedLinear() = default;
  QuantizedLinear(std::size_t rows, std::size_t cols, unsigned bits, std::size_t group_size);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  unsigned bits() const noexcept { return bits_; }
  std::size_t group_size() const noexcept { return group_size_; }
  std::size_t groups() const noexcept { return (cols_ + group_size_ - 1) / group_size_; }

  std::uint8_t code(std::size_t r, std::size_t c) const noexcept;
  void set_code(std::size_t r, std::size_t c, std::uint8_t code);

  /// [rows, groups]
  const nd::Matrix& scales() const noexcept { return scales_; }
  nd::Matrix& scales() noexcept { return scales_; }
  std::span<const std::uint8_t> zeros() const noexcept { return zeros_; }
  std::uint8_t zero(std::size_t r, std::size_t g) const noexcept { return zeros_[r * groups() + g]; }
  void set_group(std::size_t g, const GroupParams& p);

  std::span<const std::uint8_t> packed() const noexcept { return packed_; }

  /// Rebuilds from serialized parts; validates sizes and code range.
  static QuantizedLinear from_parts(std::size_t rows, std::size_t cols, unsigned bits,
                                    std::size_t group_size, std::vector<std::uint8_t> packed,
                                    nd::Matrix scales, std::vector<std::uint8_t> zeros);

  friend bool operator==(const QuantizedLinear&, const QuantizedLinear&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  unsigned bits_ = 4;
  std::size_t group_size_ = 128;
  std::size_t row_bytes_ = 0;
  std::vector<std::uint8_t> packed_;
  nd::Matrix scales_;
  std::vector<std::uint8_t> zeros_;
};

/// Ŵ = (code − zero)·scale per group.
nd::Matrix dequantize(const QuantizedLinear& q);

/// Nearest-grid rounding with min-max group grids taken from W itself.
QuantizedLinear rtn_quantize(const nd::Matrix& w, const QuantConfig& cfg);

struct GptqStats {
  double damping = 0.0;      // absolute value added to the Hessian diagonal
  unsigned retries = 0;      // ×10 escalations needed before the factorization succeeded
  std::size_t dead_columns = 0;
};

/// GPTQ over natural column order from calibration inputs X [n, d_in].
QuantizedLinear gptq_quantize(const nd::Matrix& w, const nd::Matrix& x, const QuantConfig& cfg,
                              GptqStats* stats = nullptr, const std::string& layer = "");

/// As gptq_quantize with a precomputed Hessian H = 2·XᵀX.
QuantizedLinear gptq_quantize_hessian(const nd::Matrix& w, nd::Matrix hessian,
                                      const QuantConfig& cfg, GptqStats* stats = nullptr,
                                      const std::string& layer = "");

/// ‖X·Wᵀ − X·Ŵᵀ‖_F
double reconstruction_error(const nd::Matrix& w, const nd::Matrix& w_hat, const nd::Matrix& x);

struct LayerReport {
  std::string layer;
  double weight_error = 0.0;          // ‖W − Ŵ‖_F
  double reconstruction_error = 0.0;  // ‖XWᵀ − XŴᵀ‖_F over the captured inputs
  double damping = 0.0;
  unsigned retries = 0;
};

struct QuantizedModel {
  model::ModelConfig config;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  QuantConfig qcfg;
  std::string source_id;
  std::map<std::string, QuantizedLinear> layers;
  model::TensorMap<float> passthrough;
  std::vector<LayerReport> reports;
};

/// Quantizes every attention/MLP projection in forward order. With
/// propagate_quantized each layer's inputs are captured with all earlier layers
/// already quantized. RTN needs no calibration; when `calib` is empty its
/// reconstruction errors are reported as NaN. Per-layer failures throw
/// QuantizationError after `reports` in `partial` (if given) is filled so far.
QuantizedModel quantize_model(const model::Checkpoint& ckpt, const data::CalibrationSet& calib,
                              const QuantConfig& cfg, const std::string& source_id = "",
                              QuantizedModel* partial = nullptr);

/// Full-precision checkpoint with every quantized layer replaced by Ŵ.
model::Checkpoint dequantize_model(const QuantizedModel& qm);

}  // namespace qlab::quant
