#include "qlab/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "qlab/error.hpp"
#include "qlab/fnv.hpp"

namespace qlab::model {

using nd::BasicMatrix;
using nd::ConstView;
using nd::Trans;
using nd::View;

namespace {

constexpr double kNormEps = 1e-5;

std::string block_name(std::size_t l, const char* suffix) {
  return "blocks." + std::to_string(l) + "." + suffix;
}

/// Tensor lookup with optional per-name overrides.
template <class T>
struct WeightLookup {
  const TensorMap<T>& base;
  const TensorMap<T>* overlay = nullptr;

  const BasicMatrix<T>& operator()(const std::string& name) const {
    if (overlay) {
      if (auto it = overlay->find(name); it != overlay->end()) return it->second;
    }
    auto it = base.find(name);
    if (it == base.end()) throw ContractViolation("missing tensor: " + name);
    return it->second;
  }
};

template <class T>
bool finite(const BasicMatrix<T>& m) {
  return nd::all_finite<T>(m.data());
}

template <class T>
void require_finite(const BasicMatrix<T>& m, const std::string& where) {
  if (!finite(m)) throw NumericFailure(where, "non-finite activations in " + where);
}

template <class T>
void embed(const WeightLookup<T>& w, std::span<const data::TokenId> tokens, std::size_t batch,
           std::size_t seq, BasicMatrix<T>& x) {
  const auto& tok = w("tok_emb");
  const auto& pos = w("pos_emb");
  const std::size_t d = tok.cols();
  x = BasicMatrix<T>(batch * seq, d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      const std::size_t r = b * seq + t;
      const data::TokenId id = tokens[r];
      if (id >= tok.rows()) throw ContractViolation("token id out of vocabulary range");
      auto te = tok.row(id);
      auto pe = pos.row(t);
      auto xr = x.row(r);
      for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
    }
  }
}

template <class T>
void rms_forward(const BasicMatrix<T>& x, const BasicMatrix<T>& gain, BasicMatrix<T>& y,
                 std::vector<double>& inv) {
  const std::size_t n = x.rows(), d = x.cols();
  y = BasicMatrix<T>(n, d);
  inv.assign(n, 0.0);
  auto g = gain.row(0);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    const double ss = nd::squared_norm<T>(xr);
    const double ir = 1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps);
    inv[r] = ir;
    auto yr = y.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = static_cast<T>(static_cast<double>(xr[j]) * ir * static_cast<double>(g[j]));
    }
  }
}

/// Accumulates dx and dgain for y = x · inv_rms(x) · g.
template <class T>
void rms_backward(const BasicMatrix<T>& x, const BasicMatrix<T>& gain,
                  const std::vector<double>& inv, const BasicMatrix<T>& dy, BasicMatrix<T>& dx,
                  BasicMatrix<T>& dgain) {
  const std::size_t n = x.rows(), d = x.cols();
  auto g = gain.row(0);
  auto dg = dgain.row(0);
  std::vector<double> dg_acc(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    auto dyr = dy.row(r);
    auto dxr = dx.row(r);
    const double ir = inv[r];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += static_cast<double>(g[j]) * static_cast<double>(dyr[j]) * static_cast<double>(xr[j]);
      dg_acc[j] += static_cast<double>(dyr[j]) * static_cast<double>(xr[j]) * ir;
    }
    const double coeff = ir * ir * ir * dot / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double v = ir * static_cast<double>(g[j]) * static_cast<double>(dyr[j]) -
                       static_cast<double>(xr[j]) * coeff;
      dxr[j] += static_cast<T>(v);
    }
  }
  for (std::size_t j = 0; j < d; ++j) dg[j] += static_cast<T>(dg_acc[j]);
}

/// y = x · Wᵀ
template <class T>
void linear(const BasicMatrix<T>& x, const BasicMatrix<T>& w, BasicMatrix<T>& y) {
  y = BasicMatrix<T>(x.rows(), w.rows());
  nd::gemm<T>(Trans::kNo, Trans::kYes, T{1}, x, w, T{0}, y);
}

/// dW += dyᵀ · x ; dx (+)= dy · W
template <class T>
void linear_backward(const BasicMatrix<T>& x, const BasicMatrix<T>& w, const BasicMatrix<T>& dy,
                     BasicMatrix<T>& dw, BasicMatrix<T>* dx, bool accumulate_dx) {
  nd::gemm<T>(Trans::kYes, Trans::kNo, T{1}, dy, x, T{1}, dw);
  if (dx) nd::gemm<T>(Trans::kNo, Trans::kNo, T{1}, dy, w, accumulate_dx ? T{1} : T{0}, *dx);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

template <class T>
void attention_forward(const ModelConfig& cfg, std::size_t batch, std::size_t seq,
                       BlockCache<T>& c) {
  const std::size_t d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  c.probs.assign(batch * heads * seq * seq, T{0});
  c.attn = BasicMatrix<T>(batch * seq, d);
  std::vector<double> row(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = b * seq * d + hd * dh;
      ConstView<T> qv(c.q.data().data() + off, seq, dh, d);
      ConstView<T> kv(c.k.data().data() + off, seq, dh, d);
      ConstView<T> vv(c.v.data().data() + off, seq, dh, d);
      View<T> pv(c.probs.data() + (b * heads + hd) * seq * seq, seq, seq, seq);
      nd::gemm<T>(Trans::kNo, Trans::kYes, scale, qv, kv, T{0}, pv);
      for (std::size_t i = 0; i < seq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, static_cast<double>(pv(i, j)));
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(static_cast<double>(pv(i, j)) - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j <= i; ++j) pv(i, j) = static_cast<T>(row[j] / sum);
        for (std::size_t j = i + 1; j < seq; ++j) pv(i, j) = T{0};
      }
      View<T> ov(c.attn.data().data() + off, seq, dh, d);
      nd::gemm<T>(Trans::kNo, Trans::kNo, T{1}, pv, vv, T{0}, ov);
    }
  }
}

/// Given d(attn), produces dq, dk, dv.
template <class T>
void attention_backward(const ModelConfig& cfg, std::size_t batch, std::size_t seq,
                        const BlockCache<T>& c, const BasicMatrix<T>& dattn, BasicMatrix<T>& dq,
                        BasicMatrix<T>& dk, BasicMatrix<T>& dv) {
  const std::size_t d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  dq = BasicMatrix<T>(batch * seq, d);
  dk = BasicMatrix<T>(batch * seq, d);
  dv = BasicMatrix<T>(batch * seq, d);
  BasicMatrix<T> dp(seq, seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = b * seq * d + hd * dh;
      ConstView<T> qv(c.q.data().data() + off, seq, dh, d);
      ConstView<T> kv(c.k.data().data() + off, seq, dh, d);
      ConstView<T> vv(c.v.data().data() + off, seq, dh, d);
      ConstView<T> dov(dattn.data().data() + off, seq, dh, d);
      ConstView<T> pv(c.probs.data() + (b * heads + hd) * seq * seq, seq, seq, seq);
      // dP = dO · Vᵀ ; dV = Pᵀ · dO
      nd::gemm<T>(Trans::kNo, Trans::kYes, T{1}, dov, vv, T{0}, dp);
      nd::gemm<T>(Trans::kYes, Trans::kNo, T{1}, pv, dov, T{0},
                  View<T>(dv.data().data() + off, seq, dh, d));
      // Softmax backward, then fold in the score scale.
      for (std::size_t i = 0; i < seq; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          dot += static_cast<double>(pv(i, j)) * static_cast<double>(dp(i, j));
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = static_cast<double>(pv(i, j)) * (static_cast<double>(dp(i, j)) - dot);
          dp(i, j) = static_cast<T>(ds * static_cast<double>(scale));
        }
        for (std::size_t j = i + 1; j < seq; ++j) dp(i, j) = T{0};
      }
      nd::gemm<T>(Trans::kNo, Trans::kNo, T{1}, dp, kv, T{0},
                  View<T>(dq.data().data() + off, seq, dh, d));
      nd::gemm<T>(Trans::kYes, Trans::kNo, T{1}, dp, qv, T{0},
                  View<T>(dk.data().data() + off, seq, dh, d));
    }
  }
}

// Block stages, in forward order. Each consumes fields set by the previous one.

template <class T>
void stage_norm1(const WeightLookup<T>& w, std::size_t l, BlockCache<T>& c) {
  rms_forward(c.x_in, w(block_name(l, "attn_norm")), c.h, c.inv_rms1);
}

template <class T>
void stage_attention(const WeightLookup<T>& w, const ModelConfig& cfg, std::size_t l,
                     std::size_t batch, std::size_t seq, BlockCache<T>& c) {
  linear(c.h, w(block_name(l, "attn.q")), c.q);
  linear(c.h, w(block_name(l, "attn.k")), c.k);
  linear(c.h, w(block_name(l, "attn.v")), c.v);
  attention_forward(cfg, batch, seq, c);
}

template <class T>
void stage_attn_out(const WeightLookup<T>& w, std::size_t l, BlockCache<T>& c) {
  linear(c.attn, w(block_name(l, "attn.o")), c.x_mid);
  for (std::size_t i = 0; i < c.x_mid.size(); ++i) c.x_mid.data()[i] += c.x_in.data()[i];
  rms_forward(c.x_mid, w(block_name(l, "mlp_norm")), c.h2, c.inv_rms2);
}

template <class T>
void stage_mlp_up(const WeightLookup<T>& w, std::size_t l, BlockCache<T>& c) {
  linear(c.h2, w(block_name(l, "mlp.up")), c.up);
  c.act = BasicMatrix<T>(c.up.rows(), c.up.cols());
  for (std::size_t i = 0; i < c.up.size(); ++i) {
    c.act.data()[i] = static_cast<T>(gelu(static_cast<double>(c.up.data()[i])));
  }
}

template <class T>
void stage_mlp_down(const WeightLookup<T>& w, std::size_t l, const BlockCache<T>& c,
                    BasicMatrix<T>& x_out) {
  linear(c.act, w(block_name(l, "mlp.down")), x_out);
  for (std::size_t i = 0; i < x_out.size(); ++i) x_out.data()[i] += c.x_mid.data()[i];
}

template <class T>
ForwardResult<T> forward_impl(const WeightLookup<T>& w, const ModelConfig& cfg,
                              const data::Batch& batch) {
  if (batch.seq_len > cfg.seq_len || batch.seq_len == 0) {
    throw ContractViolation("forward: batch seq_len " + std::to_string(batch.seq_len) +
                            " exceeds model seq_len " + std::to_string(cfg.seq_len));
  }
  ForwardResult<T> out;
  auto& cache = out.cache;
  cache.batch = batch.batch;
  cache.seq_len = batch.seq_len;
  cache.inputs = batch.inputs;
  cache.blocks.resize(cfg.n_layers);

  BasicMatrix<T> x;
  embed(w, batch.inputs, batch.batch, batch.seq_len, x);
  require_finite(x, "embedding");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockCache<T>& c = cache.blocks[l];
    c.x_in = std::move(x);
    stage_norm1(w, l, c);
    stage_attention(w, cfg, l, batch.batch, batch.seq_len, c);
    stage_attn_out(w, l, c);
    stage_mlp_up(w, l, c);
    stage_mlp_down(w, l, c, x);
    require_finite(x, "blocks." + std::to_string(l));
  }
  cache.x_final = std::move(x);
  rms_forward(cache.x_final, w("final_norm"), cache.h_final, cache.inv_rms_final);
  linear(cache.h_final, w("unembed"), out.logits);
  require_finite(out.logits, "logits");
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
    throw ConfigError("model: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (seq_len < 2) throw ConfigError("model: seq_len must be >= 2");
  if (!(init_std >= 0.0) || !std::isfinite(init_std)) {
    throw ConfigError("model: init_std must be finite and non-negative");
  }
}

std::vector<TensorSpec> tensor_layout(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  std::vector<TensorSpec> out;
  out.push_back({"tok_emb", cfg.vocab, d, TensorKind::kEmbedding});
  out.push_back({"pos_emb", cfg.seq_len, d, TensorKind::kEmbedding});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    out.push_back({block_name(l, "attn_norm"), 1, d, TensorKind::kGain});
    out.push_back({block_name(l, "attn.q"), d, d, TensorKind::kLinear});
    out.push_back({block_name(l, "attn.k"), d, d, TensorKind::kLinear});
    out.push_back({block_name(l, "attn.v"), d, d, TensorKind::kLinear});
    out.push_back({block_name(l, "attn.o"), d, d, TensorKind::kLinear});
    out.push_back({block_name(l, "mlp_norm"), 1, d, TensorKind::kGain});
    out.push_back({block_name(l, "mlp.up"), cfg.d_ff, d, TensorKind::kLinear});
    out.push_back({block_name(l, "mlp.down"), d, cfg.d_ff, TensorKind::kLinear});
  }
  out.push_back({"final_norm", 1, d, TensorKind::kGain});
  out.push_back({"unembed", cfg.vocab, d, TensorKind::kUnembed});
  return out;
}

std::vector<std::string> quantizable_layers(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (const char* s : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"}) {
      out.push_back(block_name(l, s));
    }
  }
  return out;
}

bool is_decayed(const ModelConfig& cfg, const std::string& tensor_name) {
  for (const TensorSpec& s : tensor_layout(cfg)) {
    if (s.name == tensor_name) return s.kind == TensorKind::kLinear || s.kind == TensorKind::kUnembed;
  }
  throw ContractViolation("is_decayed: unknown tensor " + tensor_name);
}

template <class T>
const BasicMatrix<T>& BasicCheckpoint<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractViolation("checkpoint has no tensor " + name);
  return it->second;
}

template <class T>
BasicMatrix<T>& BasicCheckpoint<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractViolation("checkpoint has no tensor " + name);
  return it->second;
}

template <class T>
void validate_checkpoint(const BasicCheckpoint<T>& ckpt) {
  ckpt.config.validate();
  const auto layout = tensor_layout(ckpt.config);
  if (layout.size() != ckpt.tensors.size()) {
    throw ContractViolation("checkpoint has " + std::to_string(ckpt.tensors.size()) +
                            " tensors, config expects " + std::to_string(layout.size()));
  }
  for (const TensorSpec& s : layout) {
    const auto& m = ckpt.at(s.name);
    if (m.rows() != s.rows || m.cols() != s.cols) {
      throw ContractViolation("tensor " + s.name + " has shape " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()) + ", expected " + std::to_string(s.rows) +
                              "x" + std::to_string(s.cols));
    }
    if (!finite(m)) throw ContractViolation("tensor " + s.name + " has non-finite entries");
  }
}

template <class T>
BasicGradientSet<T> zero_gradients(const BasicCheckpoint<T>& ckpt) {
  BasicGradientSet<T> g;
  for (const auto& [name, m] : ckpt.tensors) g.tensors.emplace(name, BasicMatrix<T>(m.rows(), m.cols()));
  return g;
}

template <class T>
BasicCheckpoint<T> init(const ModelConfig& cfg) {
  cfg.validate();
  BasicCheckpoint<T> ckpt;
  ckpt.config = cfg;
  const double resid_std = cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (const TensorSpec& s : tensor_layout(cfg)) {
    BasicMatrix<T> m(s.rows, s.cols);
    if (s.kind == TensorKind::kGain) {
      for (T& v : m.data()) v = T{1};
    } else {
      const bool resid = s.name.ends_with("attn.o") || s.name.ends_with("mlp.down");
      const double stdev = resid ? resid_std : cfg.init_std;
      if (stdev > 0.0) {
        Fnv1a h;
        h.update(s.name);
        std::mt19937_64 rng(cfg.init_seed ^ h.digest());
        std::normal_distribution<double> normal(0.0, stdev);
        for (T& v : m.data()) v = static_cast<T>(normal(rng));
      }
    }
    ckpt.tensors.emplace(s.name, std::move(m));
  }
  return ckpt;
}

template <class T>
ForwardResult<T> forward(const BasicCheckpoint<T>& ckpt, const data::Batch& batch) {
  return forward_impl(WeightLookup<T>{ckpt.tensors}, ckpt.config, batch);
}

template <class T>
BasicMatrix<T> logits(const BasicCheckpoint<T>& ckpt, const data::Batch& batch) {
  return forward(ckpt, batch).logits;
}

template <class T>
double loss(const BasicMatrix<T>& lg, std::span<const data::TokenId> targets) {
  if (lg.rows() != targets.size()) throw ContractViolation("loss: logits/targets row mismatch");
  if (lg.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < lg.rows(); ++r) {
    auto row = lg.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    total += mx + std::log(sum) - static_cast<double>(row[targets[r]]);
  }
  return total / static_cast<double>(lg.rows());
}

template <class T>
std::size_t correct_predictions(const BasicMatrix<T>& lg, std::span<const data::TokenId> targets) {
  if (lg.rows() != targets.size()) throw ContractViolation("accuracy: logits/targets row mismatch");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < lg.rows(); ++r) {
    auto row = lg.row(r);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == targets[r]) ++correct;
  }
  return correct;
}

template <class T>
double backward_into(const BasicCheckpoint<T>& ckpt, const data::Batch& batch,
                     const ForwardResult<T>& fwd, BasicGradientSet<T>& grads, T scale,
                     LossReduction reduction) {
  const ModelConfig& cfg = ckpt.config;
  const auto& cache = fwd.cache;
  if (cache.batch != batch.batch || cache.seq_len != batch.seq_len || cache.inputs != batch.inputs) {
    throw ContractViolation("backward: activation cache does not belong to this batch");
  }
  const WeightLookup<T> w{ckpt.tensors};
  const std::size_t n = batch.positions();
  const std::size_t seq = batch.seq_len;
  auto grad = [&grads](const std::string& name) -> BasicMatrix<T>& {
    auto it = grads.tensors.find(name);
    if (it == grads.tensors.end()) throw ContractViolation("gradient set missing " + name);
    return it->second;
  };

  // dlogits = (softmax − onehot) · scale / N (mean) or · scale (sum)
  const double coeff = static_cast<double>(scale) /
                       (reduction == LossReduction::kMean ? static_cast<double>(n) : 1.0);
  BasicMatrix<T> dlogits(fwd.logits.rows(), fwd.logits.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = fwd.logits.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    const data::TokenId tgt = batch.targets[r];
    total += lse - static_cast<double>(row[tgt]);
    auto dr = dlogits.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - lse);
      dr[j] = static_cast<T>((p - (j == tgt ? 1.0 : 0.0)) * coeff);
    }
  }

  BasicMatrix<T> dh(n, cfg.d_model);
  linear_backward(cache.h_final, w("unembed"), dlogits, grad("unembed"), &dh, false);
  BasicMatrix<T> dx(n, cfg.d_model);
  rms_backward(cache.x_final, w("final_norm"), cache.inv_rms_final, dh, dx, grad("final_norm"));

  BasicMatrix<T> dact, dup, dattn, dq, dk, dv;
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const BlockCache<T>& c = cache.blocks[li];
    // MLP branch: x_out = x_mid + down(gelu(up(norm(x_mid)))).
    dact = BasicMatrix<T>(n, cfg.d_ff);
    linear_backward(c.act, w(block_name(li, "mlp.down")), dx, grad(block_name(li, "mlp.down")),
                    &dact, false);
    dup = BasicMatrix<T>(n, cfg.d_ff);
    for (std::size_t i = 0; i < dup.size(); ++i) {
      dup.data()[i] = static_cast<T>(static_cast<double>(dact.data()[i]) *
                                     gelu_grad(static_cast<double>(c.up.data()[i])));
    }
    BasicMatrix<T> dh2(n, cfg.d_model);
    linear_backward(c.h2, w(block_name(li, "mlp.up")), dup, grad(block_name(li, "mlp.up")), &dh2,
                    false);
    // dx currently holds d(x_out) == d(x_mid) through the residual.
    rms_backward(c.x_mid, w(block_name(li, "mlp_norm")), c.inv_rms2, dh2, dx,
                 grad(block_name(li, "mlp_norm")));

    // Attention branch: x_mid = x_in + o(attn(norm(x_in))).
    dattn = BasicMatrix<T>(n, cfg.d_model);
    linear_backward(c.attn, w(block_name(li, "attn.o")), dx, grad(block_name(li, "attn.o")),
                    &dattn, false);
    attention_backward(cfg, batch.batch, seq, c, dattn, dq, dk, dv);
    BasicMatrix<T> dhn(n, cfg.d_model);
    linear_backward(c.h, w(block_name(li, "attn.q")), dq, grad(block_name(li, "attn.q")), &dhn,
                    true);
    linear_backward(c.h, w(block_name(li, "attn.k")), dk, grad(block_name(li, "attn.k")), &dhn,
                    true);
    linear_backward(c.h, w(block_name(li, "attn.v")), dv, grad(block_name(li, "attn.v")), &dhn,
                    true);
    rms_backward(c.x_in, w(block_name(li, "attn_norm")), c.inv_rms1, dhn, dx,
                 grad(block_name(li, "attn_norm")));
  }

  auto& dtok = grad("tok_emb");
  auto& dpos = grad("pos_emb");
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t t = r % seq;
    auto dxr = dx.row(r);
    auto te = dtok.row(batch.inputs[r]);
    auto pe = dpos.row(t);
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      te[j] += dxr[j];
      pe[j] += dxr[j];
    }
  }

  for (const auto& [name, g] : grads.tensors) {
    if (!finite(g)) throw NumericFailure(name, "non-finite gradient for " + name);
  }
  return reduction == LossReduction::kMean ? total / static_cast<double>(n) : total;
}

template <class T>
BasicGradientSet<T> backward(const BasicCheckpoint<T>& ckpt, const data::Batch& batch,
                             const ForwardResult<T>& fwd, LossReduction reduction) {
  BasicGradientSet<T> g = zero_gradients(ckpt);
  backward_into(ckpt, batch, fwd, g, T{1}, reduction);
  return g;
}

// ---------------------------------------------------------------------------
// Layer input capture

struct LayerInputWalker::State {
  const Checkpoint& ckpt;
  TensorMap<float> overlay;
  std::vector<const data::Batch*> batches;
  std::vector<BlockCache<float>> caches;  // one per calibration batch
  // Position = block * 4 + stage; stage 0: h (q/k/v input), 1: attn (o input),
  // 2: h2 (up input), 3: act (down input).
  std::size_t position = 0;

  State(const Checkpoint& c, const data::CalibrationSet& calib) : ckpt(c) {
    for (const data::Batch& b : calib.batches) batches.push_back(&b);
    caches.resize(batches.size());
    const WeightLookup<float> w{ckpt.tensors, &overlay};
    for (std::size_t i = 0; i < batches.size(); ++i) {
      const data::Batch& b = *batches[i];
      if (b.seq_len > ckpt.config.seq_len) throw ContractViolation("calibration seq_len too long");
      embed(w, b.inputs, b.batch, b.seq_len, caches[i].x_in);
    }
  }

  void advance() {
    const WeightLookup<float> w{ckpt.tensors, &overlay};
    const std::size_t block = position / 4;
    const std::size_t stage = position % 4;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      BlockCache<float>& c = caches[i];
      const data::Batch& b = *batches[i];
      switch (stage) {
        case 0:
          stage_attention(w, ckpt.config, block, b.batch, b.seq_len, c);
          break;
        case 1:
          stage_attn_out(w, block, c);
          break;
        case 2:
          stage_mlp_up(w, block, c);
          break;
        default: {
          nd::MatrixF x_out;
          stage_mlp_down(w, block, c, x_out);
          c = BlockCache<float>{};
          c.x_in = std::move(x_out);
          if (block + 1 < ckpt.config.n_layers) stage_norm1(w, block + 1, c);
          break;
        }
      }
    }
    ++position;
  }

  static std::size_t position_of(const ModelConfig& cfg, const std::string& layer) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      if (layer == block_name(l, "attn.q") || layer == block_name(l, "attn.k") ||
          layer == block_name(l, "attn.v")) {
        return l * 4;
      }
      if (layer == block_name(l, "attn.o")) return l * 4 + 1;
      if (layer == block_name(l, "mlp.up")) return l * 4 + 2;
      if (layer == block_name(l, "mlp.down")) return l * 4 + 3;
    }
    throw ContractViolation("not a quantizable layer: " + layer);
  }
};

LayerInputWalker::LayerInputWalker(const Checkpoint& ckpt, const data::CalibrationSet& calib)
    : state_(std::make_unique<State>(ckpt, calib)) {
  if (calib.batches.empty()) throw ContractViolation("calibration set is empty");
  const WeightLookup<float> w{ckpt.tensors, &state_->overlay};
  for (auto& c : state_->caches) stage_norm1(w, 0, c);
}

LayerInputWalker::~LayerInputWalker() = default;

nd::Matrix LayerInputWalker::inputs(const std::string& layer) {
  const std::size_t target = State::position_of(state_->ckpt.config, layer);
  if (target < state_->position) {
    throw ContractViolation("LayerInputWalker: " + layer + " requested out of forward order");
  }
  while (state_->position < target) state_->advance();

  const std::size_t stage = target % 4;
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (const auto& c : state_->caches) {
    const nd::MatrixF& src = stage == 0 ? c.h : stage == 1 ? c.attn : stage == 2 ? c.h2 : c.act;
    rows += src.rows();
    cols = src.cols();
  }
  nd::Matrix x(rows, cols);
  std::size_t r0 = 0;
  for (const auto& c : state_->caches) {
    const nd::MatrixF& src = stage == 0 ? c.h : stage == 1 ? c.attn : stage == 2 ? c.h2 : c.act;
    for (std::size_t i = 0; i < src.size(); ++i) {
      x.data()[r0 * cols + i] = static_cast<double>(src.data()[i]);
    }
    r0 += src.rows();
  }
  return x;
}

void LayerInputWalker::replace(const std::string& layer, nd::MatrixF weights) {
  const std::size_t pos = State::position_of(state_->ckpt.config, layer);
  if (pos < state_->position) {
    throw ContractViolation("LayerInputWalker: " + layer + " already consumed");
  }
  const auto& orig = state_->ckpt.at(layer);
  if (!orig.same_shape(weights)) throw ContractViolation("replace: shape mismatch for " + layer);
  state_->overlay.insert_or_assign(layer, std::move(weights));
}

std::map<std::string, nd::Matrix> capture_layer_inputs(const Checkpoint& ckpt,
                                                       const data::CalibrationSet& calib,
                                                       const TensorMap<float>& replacements) {
  LayerInputWalker walker(ckpt, calib);
  for (const auto& [name, m] : replacements) walker.replace(name, m);
  std::map<std::string, nd::Matrix> out;
  const nd::Matrix* shared = nullptr;
  for (const std::string& layer : quantizable_layers(ckpt.config)) {
    // q, k and v share one input.
    if (shared && (layer.ends_with("attn.k") || layer.ends_with("attn.v"))) {
      out.emplace(layer, *shared);
      continue;
    }
    auto [it, _] = out.emplace(layer, walker.inputs(layer));
    shared = layer.ends_with("attn.q") ? &it->second : nullptr;
  }
  return out;
}

#define QLAB_INSTANTIATE(T)                                                                     \
  template struct BasicCheckpoint<T>;                                                           \
  template void validate_checkpoint<T>(const BasicCheckpoint<T>&);                              \
  template BasicGradientSet<T> zero_gradients<T>(const BasicCheckpoint<T>&);                    \
  template BasicCheckpoint<T> init<T>(const ModelConfig&);                                      \
  template ForwardResult<T> forward<T>(const BasicCheckpoint<T>&, const data::Batch&);          \
  template BasicMatrix<T> logits<T>(const BasicCheckpoint<T>&, const data::Batch&);             \
  template double loss<T>(const BasicMatrix<T>&, std::span<const data::TokenId>);              \
  template std::size_t correct_predictions<T>(const BasicMatrix<T>&,                            \
                                              std::span<const data::TokenId>);                  \
  template double backward_into<T>(const BasicCheckpoint<T>&, const data::Batch&,               \
                                   const ForwardResult<T>&, BasicGradientSet<T>&, T,            \
                                   LossReduction);                                              \
  template BasicGradientSet<T> backward<T>(const BasicCheckpoint<T>&, const data::Batch&,       \
                                           const ForwardResult<T>&, LossReduction);

QLAB_INSTANTIATE(float)
QLAB_INSTANTIATE(double)

#undef QLAB_INSTANTIATE

}  // namespace qlab::model
