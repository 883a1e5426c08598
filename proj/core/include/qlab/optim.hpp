#pragma once

// AdamW / AdamC, gradient clipping, learning-rate schedules and the training loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qlab/data.hpp"
#include "qlab/model.hpp"

namespace qlab::optim {

enum class Variant { kAdamW, kAdamC };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct OptimConfig {
  double peak_lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  Variant variant = Variant::kAdamW;
  /// false: decay term η_t·λ·w. true: decay term (η_t/η_max)·λ·w, independent of the peak rate.
  bool decoupled_wd = false;

  void validate() const;
};

template <class T>
struct BasicOptimState {
  model::TensorMap<T> m;
  model::TensorMap<T> v;
  std::uint64_t t = 0;
};

using OptimState = BasicOptimState<float>;
using OptimStateD = BasicOptimState<double>;

template <class T>
BasicOptimState<T> init_state(const model::BasicCheckpoint<T>& ckpt);

enum class ScheduleKind { kConstant, kWsd, kCosine };

std::string to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

/// Linear decay grafted onto a parent schedule at `start_step`: from `start_lr`
/// down to zero at `start_step + length`.
struct Cooldown {
  std::uint64_t start_step = 0;
  std::uint64_t length = 0;
  double start_lr = 0.0;
  friend bool operator==(const Cooldown&, const Cooldown&) = default;
};

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kWsd;
  std::uint64_t total_steps = 0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t decay_steps = 0;  // wsd only
  double min_lr = 0.0;            // cosine floor
  std::optional<Cooldown> cooldown;

  /// Step counts derived from fractions of `total` (rounded to nearest).
  static ScheduleSpec from_fractions(ScheduleKind kind, std::uint64_t total, double warmup_frac,
                                     double decay_frac, double min_lr = 0.0);

  /// Last step covered by this schedule (total_steps, or the end of the cooldown).
  std::uint64_t end_step() const noexcept;

  void validate() const;
};

enum class Phase { kWarmup, kStable, kDecay, kCooldown };

/// Phase that governs `step`.
Phase phase_at(const ScheduleSpec& spec, std::uint64_t step);

/// The closed-form expression of one phase evaluated at a (possibly fractional) step.
/// Used to check continuity at phase boundaries.
double phase_formula(const ScheduleSpec& spec, double peak_lr, double step, Phase phase);

/// η(step). The update taking a model from step t to t+1 uses η(t).
/// Throws ContractViolation for step beyond end_step().
double schedule_value(const ScheduleSpec& spec, double peak_lr, std::uint64_t step);

/// Global L₂ norm over all gradient tensors, accumulated in 64-bit.
template <class T>
double global_norm(const model::BasicGradientSet<T>& grads);

/// Scales every tensor by clip_norm / g when the global norm g exceeds clip_norm.
/// Returns the pre-clip norm. Throws NumericFailure if the norm is not finite.
template <class T>
double clip_grad_norm(model::BasicGradientSet<T>& grads, double clip_norm);

/// One AdamW update in place:
///   m ← β₁m + (1−β₁)g;  v ← β₂v + (1−β₂)g²;  w ← w − η_t·m̂/(√v̂ + eps) − decay·w
/// with decay = η_t·λ (or (η_t/η_max)·λ when decoupled) on decayed tensors only.
/// On a non-finite result nothing is modified and NumericFailure is thrown.
template <class T>
void adamw_step(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg);

/// As adamw_step with the decay multiplied by η_t/η_max (∝ η_t²).
template <class T>
void adamc_step(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg);

/// Dispatches on cfg.variant.
template <class T>
void optimizer_step(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                    const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg);

/// Everything needed to continue training bit-identically.
struct TrainState {
  model::Checkpoint ckpt;
  OptimState opt;
  data::BatchCursor cursor;
};

struct BatchPlan {
  std::size_t batch_size = 16;        // sequences per optimizer step
  std::size_t micro_batch_size = 16;  // sequences per forward/backward
  std::size_t seq_len = 256;
};

struct StepLog {
  std::uint64_t step = 0;  // steps completed after this update
  std::uint64_t tokens_seen = 0;
  double lr = 0.0;         // rate used by this update
  double train_loss = 0.0;
  double grad_norm = 0.0;  // pre-clip
  double weight_norm = 0.0;
};

struct TrainHooks {
  /// Called after every update with the post-update state.
  std::function<void(const TrainState&, const StepLog&)> after_step;
};

/// Runs `steps` optimizer updates starting at state.ckpt.step. The trajectory is a pure
/// function of (state, schedule, config, stream, plan). On NumericFailure the state keeps
/// the last good checkpoint and the exception propagates.
void train_loop(TrainState& state, const ScheduleSpec& schedule, const OptimConfig& cfg,
                const data::TokenStream& train, const BatchPlan& plan, std::uint64_t steps,
                const TrainHooks& hooks = {});

}  // namespace qlab::optim
