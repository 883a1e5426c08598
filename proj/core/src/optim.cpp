#include "qlab/optim.hpp"

#include <cmath>
#include <numbers>

#include "qlab/error.hpp"
#include "qlab/metrics.hpp"

namespace qlab::optim {

std::string to_string(Variant v) { return v == Variant::kAdamC ? "adamc" : "adamw"; }

Variant parse_variant(const std::string& s) {
  if (s == "adamw") return Variant::kAdamW;
  if (s == "adamc") return Variant::kAdamC;
  throw ConfigError("optim.variant must be adamw or adamc, got '" + s + "'");
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kConstant:
      return "constant";
    case ScheduleKind::kWsd:
      return "wsd";
    case ScheduleKind::kCosine:
      return "cosine";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "wsd") return ScheduleKind::kWsd;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("schedule.kind must be constant, wsd or cosine, got '" + s + "'");
}

void OptimConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must be in [0, 1)");
  if (!(peak_lr > 0.0)) throw ConfigError("optim.peak_lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("optim.clip_norm must be positive");
  if (!(eps >= 0.0)) throw ConfigError("optim.eps must be non-negative");
}

template <class T>
BasicOptimState<T> init_state(const model::BasicCheckpoint<T>& ckpt) {
  BasicOptimState<T> s;
  for (const auto& [name, w] : ckpt.tensors) {
    s.m.emplace(name, nd::BasicMatrix<T>(w.rows(), w.cols()));
    s.v.emplace(name, nd::BasicMatrix<T>(w.rows(), w.cols()));
  }
  return s;
}

ScheduleSpec ScheduleSpec::from_fractions(ScheduleKind kind, std::uint64_t total,
                                          double warmup_frac, double decay_frac, double min_lr) {
  ScheduleSpec s;
  s.kind = kind;
  s.total_steps = total;
  s.warmup_steps = static_cast<std::uint64_t>(std::llround(warmup_frac * static_cast<double>(total)));
  s.decay_steps = kind == ScheduleKind::kWsd
                      ? static_cast<std::uint64_t>(std::llround(decay_frac * static_cast<double>(total)))
                      : 0;
  s.min_lr = min_lr;
  return s;
}

std::uint64_t ScheduleSpec::end_step() const noexcept {
  return cooldown ? cooldown->start_step + cooldown->length : total_steps;
}

void ScheduleSpec::validate() const {
  if (kind == ScheduleKind::kWsd && warmup_steps + decay_steps > total_steps) {
    throw ConfigError("schedule: warmup + decay exceeds total steps");
  }
  if (warmup_steps > total_steps) throw ConfigError("schedule: warmup exceeds total steps");
  if (!(min_lr >= 0.0)) throw ConfigError("schedule.min_lr must be non-negative");
  if (cooldown && cooldown->start_step > total_steps) {
    throw ConfigError("schedule: cooldown starts after the parent schedule ends");
  }
}

Phase phase_at(const ScheduleSpec& spec, std::uint64_t step) {
  if (spec.cooldown && step >= spec.cooldown->start_step) return Phase::kCooldown;
  if (step < spec.warmup_steps) return Phase::kWarmup;
  switch (spec.kind) {
    case ScheduleKind::kConstant:
      return Phase::kStable;
    case ScheduleKind::kWsd:
      return step >= spec.total_steps - spec.decay_steps && spec.decay_steps > 0 ? Phase::kDecay
                                                                                 : Phase::kStable;
    case ScheduleKind::kCosine:
      return Phase::kDecay;
  }
  return Phase::kStable;
}

double phase_formula(const ScheduleSpec& spec, double peak_lr, double step, Phase phase) {
  switch (phase) {
    case Phase::kWarmup:
      return peak_lr * step / static_cast<double>(spec.warmup_steps);
    case Phase::kStable:
      return peak_lr;
    case Phase::kDecay:
      if (spec.kind == ScheduleKind::kCosine) {
        const double span = static_cast<double>(spec.total_steps - spec.warmup_steps);
        const double p = span > 0.0 ? (step - static_cast<double>(spec.warmup_steps)) / span : 1.0;
        return spec.min_lr +
               0.5 * (peak_lr - spec.min_lr) * (1.0 + std::cos(std::numbers::pi * p));
      }
      return peak_lr * (static_cast<double>(spec.total_steps) - step) /
             static_cast<double>(spec.decay_steps);
    case Phase::kCooldown: {
      const Cooldown& c = *spec.cooldown;
      if (c.length == 0) return 0.0;
      return c.start_lr * (static_cast<double>(c.start_step + c.length) - step) /
             static_cast<double>(c.length);
    }
  }
  return 0.0;
}

double schedule_value(const ScheduleSpec& spec, double peak_lr, std::uint64_t step) {
  if (step > spec.end_step()) {
    throw ContractViolation("schedule_value: step " + std::to_string(step) + " beyond end " +
                            std::to_string(spec.end_step()));
  }
  return phase_formula(spec, peak_lr, static_cast<double>(step), phase_at(spec, step));
}

template <class T>
double global_norm(const model::BasicGradientSet<T>& grads) {
  double acc = 0.0;
  for (const auto& [_, g] : grads.tensors) acc += nd::squared_norm<T>(g.data());
  return std::sqrt(acc);
}

template <class T>
double clip_grad_norm(model::BasicGradientSet<T>& grads, double clip_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericFailure("clip_grad_norm", "non-finite gradient norm");
  if (norm > clip_norm) {
    const double factor = clip_norm / norm;
    for (auto& [_, g] : grads.tensors) {
      for (T& v : g.data()) v = static_cast<T>(static_cast<double>(v) * factor);
    }
  }
  return norm;
}

namespace {

template <class T>
void adam_update(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                 const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg,
                 bool adamc) {
  const std::uint64_t t = state.t + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  double decay = cfg.decoupled_wd ? cfg.weight_decay * (lr / cfg.peak_lr) : lr * cfg.weight_decay;
  if (adamc) decay = decay * (lr / cfg.peak_lr);

  // Compute into scratch first so a non-finite update leaves the state untouched.
  model::TensorMap<T> new_w, new_m, new_v;
  for (const auto& [name, w] : ckpt.tensors) {
    const auto git = grads.tensors.find(name);
    if (git == grads.tensors.end() || !git->second.same_shape(w)) {
      throw ContractViolation("optimizer: gradient for " + name + " missing or misshapen");
    }
    const auto& g = git->second;
    const auto& m = state.m.at(name);
    const auto& v = state.v.at(name);
    const double wd = model::is_decayed(ckpt.config, name) ? decay : 0.0;
    nd::BasicMatrix<T> w2(w.rows(), w.cols()), m2(w.rows(), w.cols()), v2(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g.data()[i]);
      const double mi = cfg.beta1 * static_cast<double>(m.data()[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v.data()[i]) + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      const double wi = static_cast<double>(w.data()[i]);
      const double step = lr * mhat / (std::sqrt(vhat) + cfg.eps);
      const double wn = wi - step - wd * wi;
      if (!std::isfinite(wn) || !std::isfinite(vi)) {
        throw NumericFailure(name, "non-finite optimizer update for " + name);
      }
      w2.data()[i] = static_cast<T>(wn);
      m2.data()[i] = static_cast<T>(mi);
      v2.data()[i] = static_cast<T>(vi);
    }
    new_w.emplace(name, std::move(w2));
    new_m.emplace(name, std::move(m2));
    new_v.emplace(name, std::move(v2));
  }
  ckpt.tensors = std::move(new_w);
  state.m = std::move(new_m);
  state.v = std::move(new_v);
  state.t = t;
}

}  // namespace

template <class T>
void adamw_step(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg) {
  adam_update(ckpt, state, grads, lr, cfg, /*adamc=*/false);
}

template <class T>
void adamc_step(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg) {
  adam_update(ckpt, state, grads, lr, cfg, /*adamc=*/true);
}

template <class T>
void optimizer_step(model::BasicCheckpoint<T>& ckpt, BasicOptimState<T>& state,
                    const model::BasicGradientSet<T>& grads, double lr, const OptimConfig& cfg) {
  adam_update(ckpt, state, grads, lr, cfg, cfg.variant == Variant::kAdamC);
}

void train_loop(TrainState& state, const ScheduleSpec& schedule, const OptimConfig& cfg,
                const data::TokenStream& train, const BatchPlan& plan, std::uint64_t steps,
                const TrainHooks& hooks) {
  if (plan.micro_batch_size == 0 || plan.batch_size == 0) {
    throw ConfigError("train: batch sizes must be positive");
  }
  const std::size_t total_positions = plan.batch_size * plan.seq_len;
  for (std::uint64_t i = 0; i < steps; ++i) {
    const double lr = schedule_value(schedule, cfg.peak_lr, state.ckpt.step);

    model::GradientSet grads = model::zero_gradients(state.ckpt);
    data::BatchCursor cursor = state.cursor;
    double loss_sum = 0.0;
    for (std::size_t done = 0; done < plan.batch_size;) {
      const std::size_t n = std::min(plan.micro_batch_size, plan.batch_size - done);
      const data::Batch batch = *data::next_batch(train, n, plan.seq_len, cursor, /*wrap=*/true);
      const auto fwd = model::forward(state.ckpt, batch);
      const double weight = static_cast<double>(batch.positions()) / static_cast<double>(total_positions);
      loss_sum += weight * model::backward_into(state.ckpt, batch, fwd, grads,
                                                static_cast<float>(weight));
      done += n;
    }
    const double grad_norm = clip_grad_norm(grads, cfg.clip_norm);
    optimizer_step(state.ckpt, state.opt, grads, lr, cfg);
    state.cursor = cursor;
    state.ckpt.step += 1;
    state.ckpt.tokens_seen += total_positions;

    if (hooks.after_step) {
      StepLog log;
      log.step = state.ckpt.step;
      log.tokens_seen = state.ckpt.tokens_seen;
      log.lr = lr;
      log.train_loss = loss_sum;
      log.grad_norm = grad_norm;
      log.weight_norm = metrics::weight_norm(state.ckpt);
      hooks.after_step(state, log);
    }
  }
}

#define QLAB_INSTANTIATE(T)                                                                       \
  template BasicOptimState<T> init_state<T>(const model::BasicCheckpoint<T>&);                    \
  template double global_norm<T>(const model::BasicGradientSet<T>&);                              \
  template double clip_grad_norm<T>(model::BasicGradientSet<T>&, double);                         \
  template void adamw_step<T>(model::BasicCheckpoint<T>&, BasicOptimState<T>&,                    \
                              const model::BasicGradientSet<T>&, double, const OptimConfig&);     \
  template void adamc_step<T>(model::BasicCheckpoint<T>&, BasicOptimState<T>&,                    \
                              const model::BasicGradientSet<T>&, double, const OptimConfig&);     \
  template void optimizer_step<T>(model::BasicCheckpoint<T>&, BasicOptimState<T>&,                \
                                  const model::BasicGradientSet<T>&, double, const OptimConfig&);

QLAB_INSTANTIATE(float)
QLAB_INSTANTIATE(double)

#undef QLAB_INSTANTIATE

}  // namespace qlab::optim
