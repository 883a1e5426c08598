#pragma once

// Decoder-only pre-norm transformer with hand-written forward and backward passes.
//
// Tensor naming (all linear weights stored [d_out, d_in], applied as x·Wᵀ):
//   tok_emb [vocab, d]        pos_emb [seq_len, d]
//   blocks.<l>.attn_norm [1, d]
//   blocks.<l>.attn.{q,k,v,o} [d, d]
//   blocks.<l>.mlp_norm [1, d]
//   blocks.<l>.mlp.up [d_ff, d]   blocks.<l>.mlp.down [d, d_ff]
//   final_norm [1, d]         unembed [vocab, d]

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "qlab/data.hpp"
#include "qlab/ndkernel.hpp"

namespace qlab::model {

struct ModelConfig {
  std::size_t vocab = data::kByteVocab;
  std::size_t d_model = 192;
  std::size_t n_layers = 6;
  std::size_t n_heads = 6;
  std::size_t d_ff = 768;
  std::size_t seq_len = 256;
  std::uint64_t init_seed = 0;
  double init_std = 0.02;

  /// Throws ConfigError on d_model % n_heads != 0, seq_len < 2 or zero sizes.
  void validate() const;
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TensorKind { kEmbedding, kGain, kLinear, kUnembed };

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  TensorKind kind = TensorKind::kLinear;
};

/// Every tensor of a model in canonical order.
std::vector<TensorSpec> tensor_layout(const ModelConfig& cfg);

/// Attention and MLP projections in forward order (q, k, v, o, up, down per block).
std::vector<std::string> quantizable_layers(const ModelConfig& cfg);

/// Weight decay applies to linear projections and the unembedding; norms and embeddings are exempt.
bool is_decayed(const ModelConfig& cfg, const std::string& tensor_name);

template <class T>
using TensorMap = std::map<std::string, nd::BasicMatrix<T>>;

template <class T>
struct BasicCheckpoint {
  ModelConfig config;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  TensorMap<T> tensors;

  const nd::BasicMatrix<T>& at(const std::string& name) const;
  nd::BasicMatrix<T>& at(const std::string& name);

  template <class U>
  BasicCheckpoint<U> cast() const {
    BasicCheckpoint<U> out;
    out.config = config;
    out.step = step;
    out.tokens_seen = tokens_seen;
    for (const auto& [name, m] : tensors) out.tensors.emplace(name, m.template cast<U>());
    return out;
  }
};

using Checkpoint = BasicCheckpoint<float>;
using CheckpointD = BasicCheckpoint<double>;

/// Gradients keyed and shaped exactly like the checkpoint they belong to.
template <class T>
struct BasicGradientSet {
  TensorMap<T> tensors;
};

using GradientSet = BasicGradientSet<float>;
using GradientSetD = BasicGradientSet<double>;

/// Throws ContractViolation unless the tensor names and shapes match `cfg` and all entries are finite.
template <class T>
void validate_checkpoint(const BasicCheckpoint<T>& ckpt);

template <class T>
BasicGradientSet<T> zero_gradients(const BasicCheckpoint<T>& ckpt);

/// Deterministic in `cfg.init_seed`. Linear weights and embeddings are N(0, init_std²);
/// residual output projections (attn.o, mlp.down) use init_std / sqrt(2 · n_layers); gains are 1.
template <class T>
BasicCheckpoint<T> init(const ModelConfig& cfg);

/// Per-block activations kept for the backward pass.
template <class T>
struct BlockCache {
  nd::BasicMatrix<T> x_in;         // [N, d] residual stream entering the block
  std::vector<double> inv_rms1;    // [N]
  nd::BasicMatrix<T> h;            // [N, d] attention input
  nd::BasicMatrix<T> q, k, v;      // [N, d]
  std::vector<T> probs;            // [B, H, S, S] causal softmax weights
  nd::BasicMatrix<T> attn;         // [N, d] concatenated head outputs (input to attn.o)
  nd::BasicMatrix<T> x_mid;        // [N, d] after the attention residual
  std::vector<double> inv_rms2;    // [N]
  nd::BasicMatrix<T> h2;           // [N, d] MLP input
  nd::BasicMatrix<T> up;           // [N, d_ff] pre-activation
  nd::BasicMatrix<T> act;          // [N, d_ff] GELU output (input to mlp.down)
};

template <class T>
struct ActivationCache {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<data::TokenId> inputs;
  std::vector<BlockCache<T>> blocks;
  nd::BasicMatrix<T> x_final;      // [N, d]
  std::vector<double> inv_rms_final;
  nd::BasicMatrix<T> h_final;      // [N, d]
};

template <class T>
struct ForwardResult {
  nd::BasicMatrix<T> logits;  // [batch * seq_len, vocab]
  ActivationCache<T> cache;
};

/// Full forward pass. Throws NumericFailure naming the first block (or "logits")
/// whose output contains NaN/Inf; ContractViolation if the batch is longer than seq_len.
template <class T>
ForwardResult<T> forward(const BasicCheckpoint<T>& ckpt, const data::Batch& batch);

/// Logits only; does not retain the activation cache.
template <class T>
nd::BasicMatrix<T> logits(const BasicCheckpoint<T>& ckpt, const data::Batch& batch);

/// Mean cross-entropy in nats with a max-shifted log-softmax, reduced in 64-bit.
template <class T>
double loss(const nd::BasicMatrix<T>& logits, std::span<const data::TokenId> targets);

/// Number of positions whose argmax logit equals the target (ties: lowest index).
template <class T>
std::size_t correct_predictions(const nd::BasicMatrix<T>& logits,
                                std::span<const data::TokenId> targets);

enum class LossReduction { kMean, kSum };

/// Exact gradient of the cross-entropy (mean or sum over positions), accumulated
/// into `grads` after multiplying by `scale`. Returns the loss value.
template <class T>
double backward_into(const BasicCheckpoint<T>& ckpt, const data::Batch& batch,
                     const ForwardResult<T>& fwd, BasicGradientSet<T>& grads, T scale = T{1},
                     LossReduction reduction = LossReduction::kMean);

template <class T>
BasicGradientSet<T> backward(const BasicCheckpoint<T>& ckpt, const data::Batch& batch,
                             const ForwardResult<T>& fwd,
                             LossReduction reduction = LossReduction::kMean);

/// Stacked inputs X [n, d_in] of every quantizable layer over the calibration set,
/// n = sequences × seq_len. Layers named in `replacements` run with the given
/// (typically dequantized) weights instead of the checkpoint's.
std::map<std::string, nd::Matrix> capture_layer_inputs(
    const Checkpoint& ckpt, const data::CalibrationSet& calib,
    const TensorMap<float>& replacements = {});

/// Walks the quantizable layers in forward order, capturing each layer's inputs
/// with all previously replaced layers in effect. One block-stage of compute per
/// request instead of a full forward per layer.
class LayerInputWalker {
 public:
  LayerInputWalker(const Checkpoint& ckpt, const data::CalibrationSet& calib);
  ~LayerInputWalker();
  LayerInputWalker(const LayerInputWalker&) = delete;
  LayerInputWalker& operator=(const LayerInputWalker&) = delete;

  /// Inputs for `layer`. Layers must be requested in forward order.
  nd::Matrix inputs(const std::string& layer);

  /// Uses `weights` for `layer` in all subsequent computation. Layers whose outputs
  /// have already been consumed cannot be replaced.
  void replace(const std::string& layer, nd::MatrixF weights);

 private:
  struct State;
  std::unique_ptr<State> state_;
};

}  // namespace qlab::model
