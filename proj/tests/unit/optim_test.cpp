#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qlab/data.hpp"
#include "qlab/error.hpp"
#include "qlab/optim.hpp"

namespace qlab::optim {
namespace {

// One decayed scalar and one exempt scalar.
struct ScalarModel {
  model::CheckpointD ckpt;
  OptimStateD state;
  model::GradientSetD grads;

  explicit ScalarModel(double w, double g) {
    ckpt.tensors.emplace("unembed", nd::Matrix(1, 1, w));
    ckpt.tensors.emplace("final_norm", nd::Matrix(1, 1, w));
    state = init_state(ckpt);
    grads.tensors.emplace("unembed", nd::Matrix(1, 1, g));
    grads.tensors.emplace("final_norm", nd::Matrix(1, 1, g));
  }
  double decayed() const { return ckpt.at("unembed")(0, 0); }
  double exempt() const { return ckpt.at("final_norm")(0, 0); }
};

OptimConfig plain(double lambda) {
  OptimConfig c;
  c.beta1 = 0.9;
  c.beta2 = 0.95;
  c.weight_decay = lambda;
  c.peak_lr = 0.1;
  return c;
}

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  ScalarModel s(0.7, 0.0);
  adamw_step(s.ckpt, s.state, s.grads, 0.1, plain(0.0));
  EXPECT_EQ(s.decayed(), 0.7);
  EXPECT_EQ(s.state.t, 1u);
}

TEST(AdamW, FirstStepMovesByTheLearningRate) {
  ScalarModel s(0.5, 1.0);
  OptimConfig c = plain(0.0);
  c.eps = 0.0;
  adamw_step(s.ckpt, s.state, s.grads, 0.1, c);
  EXPECT_NEAR(s.decayed(), 0.5 - 0.1, 1e-12);
}

TEST(AdamW, PureDecay) {
  ScalarModel s(2.0, 0.0);
  adamw_step(s.ckpt, s.state, s.grads, 0.01, plain(0.1));
  EXPECT_NEAR(s.decayed(), 0.999 * 2.0, 1e-12);
  EXPECT_EQ(s.exempt(), 2.0);  // norms are not decayed
}

TEST(AdamW, DecoupledDecayIgnoresThePeakRate) {
  for (double peak : {0.1, 0.05}) {
    ScalarModel s(2.0, 0.0);
    OptimConfig c = plain(0.1);
    c.decoupled_wd = true;
    c.peak_lr = peak;
    adamw_step(s.ckpt, s.state, s.grads, peak / 2, c);
    EXPECT_NEAR(s.decayed(), 2.0 * (1 - 0.1 * 0.5), 1e-12);
  }
}

TEST(AdamC, IdenticalToAdamWAtPeakRate) {
  ScalarModel a(0.3, 0.4), b(0.3, 0.4);
  const OptimConfig c = plain(0.1);
  for (int i = 0; i < 5; ++i) {
    adamw_step(a.ckpt, a.state, a.grads, c.peak_lr, c);
    adamc_step(b.ckpt, b.state, b.grads, c.peak_lr, c);
  }
  EXPECT_EQ(a.ckpt.tensors, b.ckpt.tensors);
  EXPECT_EQ(a.state.m, b.state.m);
  EXPECT_EQ(a.state.v, b.state.v);
}

TEST(AdamC, HalfRateHalvesTheDecay) {
  ScalarModel a(1.0, 0.0), b(1.0, 0.0);
  const OptimConfig c = plain(0.1);
  adamw_step(a.ckpt, a.state, a.grads, c.peak_lr / 2, c);
  adamc_step(b.ckpt, b.state, b.grads, c.peak_lr / 2, c);
  EXPECT_NEAR((1.0 - b.decayed()) / (1.0 - a.decayed()), 0.5, 1e-12);
}

TEST(AdamC, WithoutDecayMatchesAdamWAtAnyRate) {
  for (double lr : {0.1, 0.03, 0.001}) {
    ScalarModel a(0.3, -0.2), b(0.3, -0.2);
    adamw_step(a.ckpt, a.state, a.grads, lr, plain(0.0));
    adamc_step(b.ckpt, b.state, b.grads, lr, plain(0.0));
    EXPECT_EQ(a.ckpt.tensors, b.ckpt.tensors);
  }
}

TEST(AdamW, NonFiniteUpdateLeavesStateUntouched) {
  ScalarModel s(1.0, std::nan(""));
  const auto before = s.ckpt.tensors;
  EXPECT_THROW(adamw_step(s.ckpt, s.state, s.grads, 0.1, plain(0.0)), NumericFailure);
  EXPECT_EQ(s.ckpt.tensors, before);
  EXPECT_EQ(s.state.t, 0u);
}

TEST(Clip, BelowThresholdUnchanged) {
  model::GradientSetD g;
  g.tensors.emplace("a", nd::Matrix::from_rows({{0.3, 0.4}}));
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 0.5);
  EXPECT_EQ(g.tensors.at("a"), nd::Matrix::from_rows({{0.3, 0.4}}));
}

TEST(Clip, AboveThresholdRescales) {
  model::GradientSetD g;
  g.tensors.emplace("a", nd::Matrix::from_rows({{2.0}}));
  g.tensors.emplace("b", nd::Matrix::from_rows({{2.0, 2.0, 2.0}}));
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(g.tensors.at("a")(0, 0), 0.5);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
  g.tensors.at("a")(0, 0) = INFINITY;
  EXPECT_THROW(clip_grad_norm(g, 1.0), NumericFailure);
}

TEST(Schedule, WsdEndpoints) {
  const auto s = ScheduleSpec::from_fractions(ScheduleKind::kWsd, 1000, 0.01, 0.1);
  EXPECT_EQ(s.warmup_steps, 10u);
  EXPECT_EQ(s.decay_steps, 100u);
  EXPECT_EQ(schedule_value(s, 3e-3, 0), 0.0);
  EXPECT_EQ(schedule_value(s, 3e-3, 10), 3e-3);
  EXPECT_EQ(schedule_value(s, 3e-3, 500), 3e-3);
  EXPECT_EQ(schedule_value(s, 3e-3, 900), 3e-3);
  EXPECT_EQ(schedule_value(s, 3e-3, 1000), 0.0);
  EXPECT_THROW(schedule_value(s, 3e-3, 1001), ContractViolation);
}

TEST(Schedule, CosineValues) {
  auto s = ScheduleSpec::from_fractions(ScheduleKind::kCosine, 110, 10.0 / 110.0, 0.0);
  EXPECT_EQ(s.warmup_steps, 10u);
  EXPECT_EQ(schedule_value(s, 1e-3, 60), 0.5 * 1e-3);
  EXPECT_NEAR(schedule_value(s, 1e-3, 110), 0.0, 1e-18);
  s.min_lr = 1e-4;
  EXPECT_NEAR(schedule_value(s, 1e-3, 35),
              1e-4 + 0.5 * 9e-4 * (1 + std::cos(std::numbers::pi * 0.25)), 1e-18);
}

TEST(Schedule, PhaseBoundariesAreContinuous) {
  const double peak = 3e-3;
  for (auto kind : {ScheduleKind::kWsd, ScheduleKind::kCosine}) {
    auto s = ScheduleSpec::from_fractions(kind, 997, 0.03, 0.2);
    s.cooldown = Cooldown{400, 40, schedule_value(s, peak, 400)};
    const double wb = static_cast<double>(s.warmup_steps);
    EXPECT_LT(std::abs(phase_formula(s, peak, wb, Phase::kWarmup) -
                       phase_formula(s, peak, wb, kind == ScheduleKind::kWsd ? Phase::kStable : Phase::kDecay)),
              1e-12 * peak);
    if (kind == ScheduleKind::kWsd) {
      const double db = static_cast<double>(s.total_steps - s.decay_steps);
      EXPECT_LT(std::abs(phase_formula(s, peak, db, Phase::kStable) - phase_formula(s, peak, db, Phase::kDecay)),
                1e-12 * peak);
    }
    EXPECT_LT(std::abs(phase_formula(s, peak, 400, phase_at(s, 399)) - phase_formula(s, peak, 400, Phase::kCooldown)),
              1e-12 * peak);
  }
}

TEST(Schedule, CooldownDecaysToZero) {
  auto s = ScheduleSpec::from_fractions(ScheduleKind::kConstant, 1000, 0.0, 0.0);
  s.cooldown = Cooldown{500, 50, 3e-3};
  EXPECT_EQ(s.end_step(), 550u);
  EXPECT_EQ(schedule_value(s, 3e-3, 499), 3e-3);
  EXPECT_EQ(schedule_value(s, 3e-3, 500), 3e-3);
  EXPECT_DOUBLE_EQ(schedule_value(s, 3e-3, 525), 1.5e-3);
  EXPECT_EQ(schedule_value(s, 3e-3, 550), 0.0);
}

TEST(Schedule, InvalidFractionsRejected) {
  auto s = ScheduleSpec::from_fractions(ScheduleKind::kWsd, 100, 0.6, 0.6);
  EXPECT_THROW(s.validate(), ConfigError);
}

data::TokenStream cycling_stream() {
  std::vector<std::uint8_t> bytes(600);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>((i * 7) % 13);
  return data::stream_from_bytes(bytes);
}

TrainState fresh_state() {
  model::ModelConfig cfg;
  cfg.vocab = 256;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.seq_len = 8;
  cfg.init_seed = 2;
  TrainState s;
  s.ckpt = model::init<float>(cfg);
  s.opt = init_state(s.ckpt);
  return s;
}

TEST(TrainLoop, ZeroStepsIsIdentity) {
  TrainState s = fresh_state();
  const auto before = s.ckpt.tensors;
  const auto sched = ScheduleSpec::from_fractions(ScheduleKind::kWsd, 20, 0.1, 0.1);
  train_loop(s, sched, OptimConfig{}, cycling_stream(), BatchPlan{4, 2, 8}, 0);
  EXPECT_EQ(s.ckpt.tensors, before);
  EXPECT_EQ(s.ckpt.step, 0u);
}

TEST(TrainLoop, SplitRunEqualsUnbrokenRun) {
  const auto sched = ScheduleSpec::from_fractions(ScheduleKind::kWsd, 20, 0.1, 0.2);
  const auto stream = cycling_stream();
  TrainState a = fresh_state(), b = fresh_state();
  train_loop(a, sched, OptimConfig{}, stream, BatchPlan{4, 2, 8}, 20);
  train_loop(b, sched, OptimConfig{}, stream, BatchPlan{4, 2, 8}, 10);
  train_loop(b, sched, OptimConfig{}, stream, BatchPlan{4, 2, 8}, 10);
  EXPECT_EQ(a.ckpt.tensors, b.ckpt.tensors);
  EXPECT_EQ(a.opt.m, b.opt.m);
  EXPECT_EQ(a.cursor, b.cursor);
}

TEST(TrainLoop, CooldownBranchMatchesEquivalentWsdRun) {
  // Constant trunk to step 30, then a 10-step linear cooldown, against one WSD
  // run of 40 steps whose decay covers the same 10 steps.
  const double peak = 3e-3;
  ScheduleSpec trunk;
  trunk.kind = ScheduleKind::kConstant;
  trunk.total_steps = 30;
  trunk.warmup_steps = 4;
  ScheduleSpec branch = trunk;
  branch.cooldown = Cooldown{30, 10, schedule_value(trunk, peak, 30)};
  ScheduleSpec wsd;
  wsd.kind = ScheduleKind::kWsd;
  wsd.total_steps = 40;
  wsd.warmup_steps = 4;
  wsd.decay_steps = 10;
  for (std::uint64_t t = 0; t <= 40; ++t) {
    EXPECT_NEAR(schedule_value(branch, peak, t), schedule_value(wsd, peak, t), 1e-15 * peak) << t;
  }

  OptimConfig c;
  c.peak_lr = peak;
  const auto stream = cycling_stream();
  std::vector<double> lr_a, lr_b;
  TrainHooks ha, hb;
  ha.after_step = [&](const TrainState&, const StepLog& l) { lr_a.push_back(l.lr); };
  hb.after_step = [&](const TrainState&, const StepLog& l) { lr_b.push_back(l.lr); };
  TrainState a = fresh_state(), b = fresh_state();
  train_loop(a, trunk, c, stream, BatchPlan{4, 2, 8}, 30, ha);
  train_loop(a, branch, c, stream, BatchPlan{4, 2, 8}, 10, ha);
  train_loop(b, wsd, c, stream, BatchPlan{4, 2, 8}, 40, hb);
  ASSERT_EQ(lr_a.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_NEAR(lr_a[i], lr_b[i], 1e-15 * peak) << i;
  EXPECT_EQ(a.ckpt.step, b.ckpt.step);
  for (const auto& [name, m] : a.ckpt.tensors) {
    const auto& other = b.ckpt.at(name);
    for (std::size_t i = 0; i < m.data().size(); ++i) {
      EXPECT_NEAR(m.data()[i], other.data()[i], 1e-5) << name;
    }
  }
}

TEST(TrainLoop, LossDecreasesOnARepetitiveStream) {
  TrainState s = fresh_state();
  const auto sched = ScheduleSpec::from_fractions(ScheduleKind::kWsd, 60, 0.1, 0.2);
  OptimConfig c;
  c.peak_lr = 1e-2;
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.after_step = [&](const TrainState&, const StepLog& log) { losses.push_back(log.train_loss); };
  train_loop(s, sched, c, cycling_stream(), BatchPlan{4, 4, 8}, 60, hooks);
  ASSERT_EQ(losses.size(), 60u);
  EXPECT_LT(losses.back(), losses.front() * 0.7);
}

}  // namespace
}  // namespace qlab::optim
