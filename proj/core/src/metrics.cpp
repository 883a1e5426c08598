#include "qlab/metrics.hpp"

#include <cmath>

#include "qlab/error.hpp"

namespace qlab::metrics {

EvalResult evaluate(const model::Checkpoint& ckpt, std::span<const data::Batch> batches) {
  EvalResult r;
  double ce_sum = 0.0;
  std::size_t correct = 0;
  for (const data::Batch& b : batches) {
    const auto lg = model::logits(ckpt, b);
    ce_sum += model::loss(lg, b.targets) * static_cast<double>(b.positions());
    correct += model::correct_predictions(lg, b.targets);
    r.positions += b.positions();
  }
  if (r.positions == 0) throw ContractViolation("evaluate: empty evaluation set");
  r.ce = ce_sum / static_cast<double>(r.positions);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.positions);
  return r;
}

EvalResult evaluate(const quant::QuantizedModel& qm, std::span<const data::Batch> batches) {
  return evaluate(quant::dequantize_model(qm), batches);
}

double eval_ce(const model::Checkpoint& ckpt, std::span<const data::Batch> batches) {
  return evaluate(ckpt, batches).ce;
}

double eval_accuracy(const model::Checkpoint& ckpt, std::span<const data::Batch> batches) {
  return evaluate(ckpt, batches).accuracy;
}

double relative_ce_error(double ce_q, double ce_fp) {
  if (!(ce_fp > 0.0)) throw ContractViolation("relative_ce_error: ce_fp must be positive");
  return ce_q / ce_fp - 1.0;
}

double delta_ptq(double ce_q, double ce_fp) { return ce_q - ce_fp; }

double relative_acc_drop(double acc_fp, double acc_q) {
  if (!(acc_fp >= 0.0 && acc_fp <= 1.0) || !(acc_q >= 0.0 && acc_q <= 1.0)) {
    throw ContractViolation("relative_acc_drop: accuracies must lie in [0, 1]");
  }
  if (1.0 - acc_fp < 1e-6) {
    throw ContractViolation("relative_acc_drop: undefined for acc_fp at or near 1");
  }
  return (acc_fp - acc_q) / (1.0 - acc_fp);
}

void MetricRecord::derive() {
  rel_ce_err.clear();
  delta_ptq.clear();
  rel_acc_drop.clear();
  if (val_ce_fp) {
    for (const auto& [bits, ce] : val_ce_q) {
      rel_ce_err[bits] = relative_ce_error(ce, *val_ce_fp);
      delta_ptq[bits] = metrics::delta_ptq(ce, *val_ce_fp);
    }
  }
  if (acc_fp && 1.0 - *acc_fp >= 1e-6) {
    for (const auto& [bits, acc] : acc_q) rel_acc_drop[bits] = relative_acc_drop(*acc_fp, acc);
  }
}

void MetricRecord::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) throw ContractViolation("MetricRecord(step " + std::to_string(step) + "): " + what);
  };
  if (val_ce_fp) check(*val_ce_fp > 0.0 && finite(*val_ce_fp), "val_ce_fp must be positive");
  for (const auto& [b, v] : val_ce_q) check(v > 0.0 && finite(v), "val_ce_q must be positive");
  if (acc_fp) check(*acc_fp >= 0.0 && *acc_fp <= 1.0, "acc_fp outside [0,1]");
  for (const auto& [b, v] : acc_q) check(v >= 0.0 && v <= 1.0, "acc_q outside [0,1]");
  for (const auto* m : {&rel_ce_err, &delta_ptq, &rel_acc_drop}) {
    for (const auto& [b, v] : *m) check(finite(v), "non-finite derived metric");
  }
  for (const auto& o : {lr, train_loss, grad_norm, weight_norm}) {
    if (o) check(finite(*o), "non-finite scalar metric");
  }
  if (val_ce_fp) {
    for (const auto& [b, d] : delta_ptq) {
      const auto it = rel_ce_err.find(b);
      check(it != rel_ce_err.end(), "delta_ptq without rel_ce_err");
      check(std::abs(d - it->second * *val_ce_fp) <= 1e-12 * std::max(1.0, std::abs(d)) + 1e-12,
            "delta_ptq != rel_ce_err * ce_fp");
    }
  }
}

}  // namespace qlab::metrics
