#include "qlab/quant.hpp"

#include <cmath>
#include <limits>

#include "qlab/error.hpp"

namespace qlab::quant {

using nd::ConstView;
using nd::Matrix;

std::string to_string(Method m) { return m == Method::kRtn ? "rtn" : "gptq"; }

Method parse_method(const std::string& s) {
  if (s == "rtn") return Method::kRtn;
  if (s == "gptq") return Method::kGptq;
  throw ConfigError("quant.method must be rtn or gptq, got '" + s + "'");
}

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw ConfigError("quant.bits must be in [2, 8]");
  if (group_size < 1) throw ConfigError("quant.group_size must be >= 1");
  if (!(damping_frac > 0.0 && damping_frac < 1.0)) {
    throw ConfigError("quant.damping_frac must be in (0, 1)");
  }
}

GroupParams group_params(ConstView<double> w, unsigned bits) {
  const double maxq = static_cast<double>((1u << bits) - 1u);
  GroupParams p;
  p.scale.resize(w.rows);
  p.zero.resize(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < w.cols; ++c) {
      mn = std::min(mn, w(r, c));
      mx = std::max(mx, w(r, c));
    }
    if (w.cols == 0 || mn == mx) {
      const double c = w.cols == 0 ? 0.0 : mn;
      p.scale[r] = c == 0.0 ? 1.0 : std::abs(c);
      p.zero[r] = c < 0.0 ? 1 : 0;
      continue;
    }
    const double lo = std::min(mn, 0.0);
    const double hi = std::max(mx, 0.0);
    p.scale[r] = (hi - lo) / maxq;
    const double z = std::floor(-lo * maxq / (hi - lo) + 0.5);
    p.zero[r] = static_cast<std::uint8_t>(std::clamp(z, 0.0, maxq));
  }
  return p;
}

std::uint8_t quantize_value(double w, double scale, std::uint8_t zero, unsigned bits) {
  const double maxq = static_cast<double>((1u << bits) - 1u);
  const double q = std::floor(w / scale + 0.5) + static_cast<double>(zero);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, maxq));
}

std::size_t packed_row_bytes(std::size_t cols, unsigned bits) { return (cols * bits + 7) / 8; }

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, std::size_t rows,
                                     std::size_t cols, unsigned bits) {
  if (codes.size() != rows * cols) throw ContractViolation("pack_codes: size mismatch");
  const std::size_t rb = packed_row_bytes(cols, bits);
  std::vector<std::uint8_t> out(rows * rb, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::uint8_t* row = out.data() + r * rb;
    for (std::size_t c = 0; c < cols; ++c) {
      const unsigned v = codes[r * cols + c];
      if (v >> bits) throw ContractViolation("pack_codes: code does not fit in bit width");
      const std::size_t bit = c * bits;
      const unsigned shifted = v << (bit % 8);
      row[bit / 8] |= static_cast<std::uint8_t>(shifted & 0xffu);
      if ((bit % 8) + bits > 8) row[bit / 8 + 1] |= static_cast<std::uint8_t>(shifted >> 8);
    }
  }
  return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t rows,
                                       std::size_t cols, unsigned bits) {
  const std::size_t rb = packed_row_bytes(cols, bits);
  if (packed.size() != rows * rb) throw ContractViolation("unpack_codes: size mismatch");
  const unsigned mask = (1u << bits) - 1u;
  std::vector<std::uint8_t> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* row = packed.data() + r * rb;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t bit = c * bits;
      unsigned v = row[bit / 8];
      if ((bit % 8) + bits > 8) v |= static_cast<unsigned>(row[bit / 8 + 1]) << 8;
      out[r * cols + c] = static_cast<std::uint8_t>((v >> (bit % 8)) & mask);
    }
  }
  return out;
}

QuantizedLinear::QuantizedLinear(std::size_t rows, std::size_t cols, unsigned bits,
                                 std::size_t group_size)
    : rows_(rows),
      cols_(cols),
      bits_(bits),
      group_size_(group_size),
      row_bytes_(packed_row_bytes(cols, bits)),
      packed_(rows * row_bytes_, 0),
      scales_(rows, (cols + group_size - 1) / group_size, 1.0),
      zeros_(rows * ((cols + group_size - 1) / group_size), 0) {
  if (bits < 2 || bits > 8 || group_size == 0) {
    throw ContractViolation("QuantizedLinear: invalid bits/group_size");
  }
}

std::uint8_t QuantizedLinear::code(std::size_t r, std::size_t c) const noexcept {
  const std::uint8_t* row = packed_.data() + r * row_bytes_;
  const std::size_t bit = c * bits_;
  unsigned v = row[bit / 8];
  if ((bit % 8) + bits_ > 8) v |= static_cast<unsigned>(row[bit / 8 + 1]) << 8;
  return static_cast<std::uint8_t>((v >> (bit % 8)) & ((1u << bits_) - 1u));
}

void QuantizedLinear::set_code(std::size_t r, std::size_t c, std::uint8_t code) {
  if (code >> bits_) throw ContractViolation("set_code: code does not fit in bit width");
  std::uint8_t* row = packed_.data() + r * row_bytes_;
  const std::size_t bit = c * bits_;
  const unsigned mask = ((1u << bits_) - 1u) << (bit % 8);
  const unsigned shifted = static_cast<unsigned>(code) << (bit % 8);
  row[bit / 8] = static_cast<std::uint8_t>((row[bit / 8] & ~mask) | (shifted & 0xffu));
  if ((bit % 8) + bits_ > 8) {
    row[bit / 8 + 1] =
        static_cast<std::uint8_t>((row[bit / 8 + 1] & ~(mask >> 8)) | (shifted >> 8));
  }
}

void QuantizedLinear::set_group(std::size_t g, const GroupParams& p) {
  for (std::size_t r = 0; r < rows_; ++r) {
    scales_(r, g) = p.scale[r];
    zeros_[r * groups() + g] = p.zero[r];
  }
}

QuantizedLinear QuantizedLinear::from_parts(std::size_t rows, std::size_t cols, unsigned bits,
                                            std::size_t group_size,
                                            std::vector<std::uint8_t> packed, Matrix scales,
                                            std::vector<std::uint8_t> zeros) {
  QuantizedLinear q(rows, cols, bits, group_size);
  if (packed.size() != q.packed_.size() || scales.rows() != rows || scales.cols() != q.groups() ||
      zeros.size() != q.zeros_.size()) {
    throw FormatError("QuantizedLinear: serialized parts have inconsistent sizes");
  }
  for (std::uint8_t z : zeros) {
    if (z > ((1u << bits) - 1u)) throw FormatError("QuantizedLinear: zero point exceeds bit width");
  }
  for (double s : scales.data()) {
    if (!(s > 0.0) || !std::isfinite(s)) throw FormatError("QuantizedLinear: non-positive scale");
  }
  q.packed_ = std::move(packed);
  q.scales_ = std::move(scales);
  q.zeros_ = std::move(zeros);
  // Padding bits must be clear so equality and checksums are canonical.
  const std::size_t used = cols * bits;
  if (used % 8 != 0) {
    const auto pad_mask = static_cast<std::uint8_t>(0xffu << (used % 8));
    for (std::size_t r = 0; r < rows; ++r) {
      if (q.packed_[r * q.row_bytes_ + q.row_bytes_ - 1] & pad_mask) {
        throw FormatError("QuantizedLinear: non-zero padding bits");
      }
    }
  }
  return q;
}

Matrix dequantize(const QuantizedLinear& q) {
  Matrix w(q.rows(), q.cols());
  const std::size_t groups = q.groups();
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t c = 0; c < q.cols(); ++c) {
      const std::size_t g = c / q.group_size();
      w(r, c) = dequantize_value(q.code(r, c), q.scales()(r, g), q.zeros()[r * groups + g]);
    }
  }
  return w;
}

namespace {

void require_finite(const Matrix& w, const char* who) {
  if (!nd::all_finite<double>(w.data())) {
    throw ContractViolation(std::string(who) + ": weights contain NaN/Inf");
  }
}

}  // namespace

QuantizedLinear rtn_quantize(const Matrix& w, const QuantConfig& cfg) {
  cfg.validate();
  require_finite(w, "rtn_quantize");
  QuantizedLinear q(w.rows(), w.cols(), cfg.bits, cfg.group_size);
  for (std::size_t g = 0; g < q.groups(); ++g) {
    const std::size_t c0 = g * cfg.group_size;
    const std::size_t c1 = std::min(c0 + cfg.group_size, w.cols());
    const GroupParams p = group_params(ConstView<double>(w).block(0, c0, w.rows(), c1 - c0), cfg.bits);
    q.set_group(g, p);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = c0; c < c1; ++c) {
        q.set_code(r, c, quantize_value(w(r, c), p.scale[r], p.zero[r], cfg.bits));
      }
    }
  }
  return q;
}

QuantizedLinear gptq_quantize(const Matrix& w, const Matrix& x, const QuantConfig& cfg,
                              GptqStats* stats, const std::string& layer) {
  if (x.rows() == 0) throw ContractViolation("gptq_quantize: no calibration rows");
  if (x.cols() != w.cols()) {
    throw ContractViolation("gptq_quantize: X has " + std::to_string(x.cols()) +
                            " columns, W has " + std::to_string(w.cols()));
  }
  Matrix h(w.cols(), w.cols());
  nd::gemm<double>(nd::Trans::kYes, nd::Trans::kNo, 2.0, x, x, 0.0, h);
  return gptq_quantize_hessian(w, std::move(h), cfg, stats, layer);
}

QuantizedLinear gptq_quantize_hessian(const Matrix& w, Matrix h, const QuantConfig& cfg,
                                      GptqStats* stats, const std::string& layer) {
  cfg.validate();
  require_finite(w, "gptq_quantize");
  const std::size_t n = w.cols();
  const std::size_t rows = w.rows();
  if (h.rows() != n || h.cols() != n) throw ContractViolation("gptq_quantize: Hessian shape");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double avg = 0.5 * (h(i, j) + h(j, i));
      h(i, j) = avg;
      h(j, i) = avg;
    }
  }

  Matrix work = w;
  GptqStats local;
  for (std::size_t j = 0; j < n; ++j) {
    if (h(j, j) == 0.0) {
      h(j, j) = 1.0;
      for (std::size_t r = 0; r < rows; ++r) work(r, j) = 0.0;
      ++local.dead_columns;
    }
  }
  double mean_diag = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean_diag += h(j, j);
  mean_diag /= static_cast<double>(n);

  // U: upper Cholesky factor of the damped inverse Hessian. Damping ladder ×1, ×10, ×100.
  Matrix u;
  for (unsigned attempt = 0;; ++attempt) {
    const double damp = cfg.damping_frac * std::pow(10.0, attempt) * mean_diag;
    Matrix hd = h;
    for (std::size_t j = 0; j < n; ++j) hd(j, j) += damp;
    try {
      u = nd::cholesky_upper(nd::spd_inverse(hd));
      local.damping = damp;
      local.retries = attempt;
      break;
    } catch (const FactorizationError& e) {
      if (attempt == 2) {
        throw QuantizationError(layer, "GPTQ Hessian factorization failed for layer '" + layer +
                                           "' after damping x100: " + e.what());
      }
    }
  }

  QuantizedLinear q(rows, n, cfg.bits, cfg.group_size);
  GroupParams params;
  std::vector<double> err(rows);
  for (std::size_t j = 0; j < n; ++j) {
    if (j % cfg.group_size == 0) {
      const std::size_t g = j / cfg.group_size;
      const std::size_t width = std::min(cfg.group_size, n - j);
      const Matrix& src = cfg.group_stats == GroupStats::kCompensated ? work : w;
      params = group_params(ConstView<double>(src).block(0, j, rows, width), cfg.bits);
      q.set_group(g, params);
    }
    const double ujj = u(j, j);
    for (std::size_t r = 0; r < rows; ++r) {
      const double wv = work(r, j);
      const std::uint8_t code = quantize_value(wv, params.scale[r], params.zero[r], cfg.bits);
      q.set_code(r, j, code);
      err[r] = (wv - dequantize_value(code, params.scale[r], params.zero[r])) / ujj;
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const double e = err[r];
      if (e == 0.0) continue;
      auto wr = work.row(r);
      auto ur = u.row(j);
      for (std::size_t k = j + 1; k < n; ++k) wr[k] -= e * ur[k];
    }
  }
  if (stats) *stats = local;
  return q;
}

double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  if (!w.same_shape(w_hat) || x.cols() != w.cols()) {
    throw ContractViolation("reconstruction_error: shape mismatch");
  }
  const Matrix diff = nd::subtract(w, w_hat);
  return nd::frobenius_norm(nd::matmul_nt(x, diff));
}

QuantizedModel quantize_model(const model::Checkpoint& ckpt, const data::CalibrationSet& calib,
                              const QuantConfig& cfg, const std::string& source_id,
                              QuantizedModel* partial) {
  cfg.validate();
  QuantizedModel qm;
  qm.config = ckpt.config;
  qm.step = ckpt.step;
  qm.tokens_seen = ckpt.tokens_seen;
  qm.qcfg = cfg;
  qm.source_id = source_id;
  const auto layers = model::quantizable_layers(ckpt.config);
  for (const auto& [name, m] : ckpt.tensors) {
    if (std::find(layers.begin(), layers.end(), name) == layers.end()) qm.passthrough.emplace(name, m);
  }

  const bool have_calib = !calib.batches.empty();
  if (cfg.method == Method::kGptq && !have_calib) {
    throw ContractViolation("quantize_model: GPTQ requires a non-empty calibration set");
  }
  std::unique_ptr<model::LayerInputWalker> walker;
  if (have_calib) walker = std::make_unique<model::LayerInputWalker>(ckpt, calib);

  Matrix x;
  Matrix hessian;
  for (const std::string& layer : layers) {
    const Matrix w = ckpt.at(layer).cast<double>();
    const bool shares_input = layer.ends_with("attn.k") || layer.ends_with("attn.v");
    if (walker && !shares_input) {
      x = walker->inputs(layer);
      if (cfg.method == Method::kGptq) {
        hessian = Matrix(x.cols(), x.cols());
        nd::gemm<double>(nd::Trans::kYes, nd::Trans::kNo, 2.0, x, x, 0.0, hessian);
      }
    }
    LayerReport report;
    report.layer = layer;
    QuantizedLinear q;
    try {
      if (cfg.method == Method::kGptq) {
        GptqStats st;
        q = gptq_quantize_hessian(w, hessian, cfg, &st, layer);
        report.damping = st.damping;
        report.retries = st.retries;
      } else {
        q = rtn_quantize(w, cfg);
      }
    } catch (...) {
      if (partial) *partial = qm;
      throw;
    }
    const Matrix w_hat = dequantize(q);
    report.weight_error = nd::frobenius_norm(nd::subtract(w, w_hat));
    report.reconstruction_error = walker ? reconstruction_error(w, w_hat, x)
                                         : std::numeric_limits<double>::quiet_NaN();
    if (walker && cfg.propagate_quantized) walker->replace(layer, w_hat.cast<float>());
    qm.layers.emplace(layer, std::move(q));
    qm.reports.push_back(report);
  }
  if (partial) *partial = qm;
  return qm;
}

model::Checkpoint dequantize_model(const QuantizedModel& qm) {
  model::Checkpoint ckpt;
  ckpt.config = qm.config;
  ckpt.step = qm.step;
  ckpt.tokens_seen = qm.tokens_seen;
  ckpt.tensors = qm.passthrough;
  for (const auto& [name, q] : qm.layers) ckpt.tensors.insert_or_assign(name, dequantize(q).cast<float>());
  return ckpt;
}

}  // namespace qlab::quant
