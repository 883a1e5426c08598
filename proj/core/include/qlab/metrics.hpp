#pragma once

// Validation cross-entropy / accuracy and the quantization-degradation metrics.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "qlab/data.hpp"
#include "qlab/model.hpp"
#include "qlab/quant.hpp"

namespace qlab::metrics {

struct EvalResult {
  double ce = 0.0;        // mean nats per position
  double accuracy = 0.0;  // argmax == target
  std::size_t positions = 0;
};

/// CE and accuracy in one pass over a fixed batch set. Deterministic.
EvalResult evaluate(const model::Checkpoint& ckpt, std::span<const data::Batch> batches);

/// Dequantizes every layer and runs the standard forward.
EvalResult evaluate(const quant::QuantizedModel& qm, std::span<const data::Batch> batches);

double eval_ce(const model::Checkpoint& ckpt, std::span<const data::Batch> batches);
double eval_accuracy(const model::Checkpoint& ckpt, std::span<const data::Batch> batches);

/// CE(Ŵ)/CE(W) − 1. Throws ContractViolation when ce_fp ≤ 0.
double relative_ce_error(double ce_q, double ce_fp);

/// CE(Ŵ) − CE(W).
double delta_ptq(double ce_q, double ce_fp);

/// (Acc(W) − Acc(Ŵ)) / (1 − Acc(W)). Throws ContractViolation when acc_fp is
/// outside [0, 1) or within 1e-6 of 1, or acc_q outside [0, 1].
double relative_acc_drop(double acc_fp, double acc_q);

/// Global L₂ norm over every tensor of the checkpoint, accumulated in 64-bit.
template <class T>
double weight_norm(const model::BasicCheckpoint<T>& ckpt) {
  double acc = 0.0;
  for (const auto& [_, m] : ckpt.tensors) acc += nd::squared_norm<T>(m.data());
  return std::sqrt(acc);
}

/// One evaluation row. Absent measurements are nullopt.
struct MetricRecord {
  std::string run_id;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  std::optional<double> lr;
  std::optional<double> train_loss;
  std::optional<double> val_ce_fp;
  std::map<unsigned, double> val_ce_q;  // bits → CE(Ŵ)
  std::map<unsigned, double> rel_ce_err;
  std::map<unsigned, double> delta_ptq;
  std::optional<double> acc_fp;
  std::map<unsigned, double> acc_q;
  std::map<unsigned, double> rel_acc_drop;
  std::optional<double> grad_norm;
  std::optional<double> weight_norm;

  /// Fills rel_ce_err / delta_ptq / rel_acc_drop from the raw CE and accuracy values.
  void derive();

  /// Throws ContractViolation when CE values are not positive, accuracies fall outside
  /// [0, 1], any value is non-finite, or the rel_ce_err/delta_ptq identity is broken.
  void validate() const;
};

}  // namespace qlab::metrics
