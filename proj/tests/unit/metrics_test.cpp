#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qlab/error.hpp"
#include "qlab/metrics.hpp"
#include "qlab/optim.hpp"
#include "qlab/quant.hpp"
#include "qlab/synthetic_corpus.hpp"

namespace qlab::metrics {
namespace {

TEST(RelativeCeError, Examples) {
  EXPECT_EQ(relative_ce_error(2.0, 2.0), 0.0);
  EXPECT_NEAR(relative_ce_error(2.2, 2.0), 0.1, 1e-15);
  EXPECT_LT(relative_ce_error(1.9, 2.0), 0.0);
  EXPECT_THROW(relative_ce_error(1.0, 0.0), ContractViolation);
}

TEST(DeltaPtq, ExamplesAndIdentity) {
  EXPECT_EQ(delta_ptq(2.0, 2.0), 0.0);
  EXPECT_EQ(delta_ptq(2.5, 2.0), 0.5);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 6.0);
  for (int i = 0; i < 1000; ++i) {
    const double fp = u(rng), q = u(rng);
    EXPECT_NEAR(delta_ptq(q, fp), relative_ce_error(q, fp) * fp, 1e-12);
    EXPECT_NEAR(relative_ce_error(q, fp), q / fp - 1.0, 1e-12);
  }
}

TEST(RelativeAccDrop, Examples) {
  EXPECT_EQ(relative_acc_drop(0.6, 0.6), 0.0);
  EXPECT_NEAR(relative_acc_drop(0.6, 0.4), 0.5, 1e-15);
  EXPECT_LT(relative_acc_drop(0.5, 0.6), 0.0);
  EXPECT_THROW(relative_acc_drop(1.0, 0.5), ContractViolation);
  EXPECT_THROW(relative_acc_drop(0.9999995, 0.5), ContractViolation);
  EXPECT_THROW(relative_acc_drop(0.5, 1.5), ContractViolation);
}

TEST(WeightNorm, Examples) {
  model::Checkpoint ck;
  ck.tensors.emplace("a", nd::MatrixF(2, 2));
  EXPECT_EQ(weight_norm(ck), 0.0);
  ck.tensors.at("a") = nd::MatrixF::from_rows({{3, 4}});
  EXPECT_EQ(weight_norm(ck), 5.0);
}

TEST(WeightNorm, MatchesConcatenation) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0.0f, 1.0f);
  model::Checkpoint ck;
  std::vector<double> flat;
  for (int t = 0; t < 5; ++t) {
    nd::MatrixF m(3 + t, 7);
    for (float& v : m.data()) {
      v = n(rng);
      flat.push_back(v);
    }
    ck.tensors.emplace("t" + std::to_string(t), m);
  }
  long double ss = 0;
  for (double v : flat) ss += static_cast<long double>(v) * v;
  const double want = std::sqrt(static_cast<double>(ss));
  EXPECT_LT(std::abs(weight_norm(ck) - want) / want, 1e-12);
}

TEST(MetricRecord, DeriveFillsEveryBitWidth) {
  MetricRecord r;
  r.val_ce_fp = 2.0;
  r.val_ce_q = {{3, 2.4}, {4, 2.1}};
  r.acc_fp = 0.6;
  r.acc_q = {{3, 0.4}, {4, 0.5}};
  r.derive();
  EXPECT_NEAR(r.rel_ce_err.at(3), 0.2, 1e-15);
  EXPECT_NEAR(r.delta_ptq.at(4), 0.1, 1e-15);
  EXPECT_NEAR(r.rel_acc_drop.at(3), 0.5, 1e-15);
  EXPECT_NO_THROW(r.validate());
  r.delta_ptq[3] += 1e-6;
  EXPECT_THROW(r.validate(), ContractViolation);
}

TEST(MetricRecord, ValidateRejectsImpossibleValues) {
  MetricRecord r;
  r.val_ce_fp = -1.0;
  EXPECT_THROW(r.validate(), ContractViolation);
  r.val_ce_fp = 1.0;
  r.acc_q[3] = 1.2;
  EXPECT_THROW(r.validate(), ContractViolation);
}

// A small model trained for a few dozen steps on synthetic text.
struct Trained {
  model::Checkpoint ckpt;
  std::vector<data::Batch> val;
  data::CalibrationSet calib;
};

const Trained& trained() {
  static const Trained t = [] {
    const std::string text = data::synthetic_corpus(120000, 5);
    const auto stream = data::stream_from_bytes({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    const auto splits = data::split(stream, 0.05, 0.05, 1);
    model::ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 48;
    cfg.seq_len = 16;
    cfg.init_seed = 9;
    optim::TrainState s;
    s.ckpt = model::init<float>(cfg);
    s.opt = optim::init_state(s.ckpt);
    optim::OptimConfig oc;
    oc.peak_lr = 1e-2;
    const auto sched = optim::ScheduleSpec::from_fractions(optim::ScheduleKind::kWsd, 1000, 0.05, 0.2);
    optim::train_loop(s, sched, oc, splits.train, optim::BatchPlan{8, 8, 16}, 1000);
    Trained out;
    out.ckpt = s.ckpt;
    out.val = data::fixed_batches(splits.val, 32, 8, 16);
    out.calib = data::make_calibration(splits.calib, 16, 16);
    return out;
  }();
  return t;
}

TEST(Evaluate, UntrainedUniformModelGivesLogVocab) {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 8;
  cfg.seq_len = 16;
  cfg.init_std = 0.0;
  const auto ck = model::init<float>(cfg);
  const EvalResult r = evaluate(ck, trained().val);
  EXPECT_NEAR(r.ce, std::log(256.0), 1e-6);
  // Ties resolve to token 0, which never occurs in text.
  EXPECT_EQ(r.accuracy, 0.0);
}

TEST(Evaluate, DeterministicAndBetterThanUniform) {
  const auto& t = trained();
  const EvalResult a = evaluate(t.ckpt, t.val);
  const EvalResult b = evaluate(t.ckpt, t.val);
  EXPECT_EQ(a.ce, b.ce);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.positions, 32u * 16u);
  EXPECT_LT(a.ce, std::log(256.0) - 1.0);
  EXPECT_GT(a.accuracy, 0.1);
}

TEST(Evaluate, EightBitPerColumnIsNearLossless) {
  const auto& t = trained();
  quant::QuantConfig qc;
  qc.bits = 8;
  qc.group_size = 1;
  const auto qm = quant::quantize_model(t.ckpt, t.calib, qc);
  const double rel = relative_ce_error(evaluate(qm, t.val).ce, evaluate(t.ckpt, t.val).ce);
  EXPECT_LT(std::abs(rel), 1e-3);
}

TEST(Evaluate, ThreeBitsDegradeMoreThanFour) {
  const auto& t = trained();
  const double fp = evaluate(t.ckpt, t.val).ce;
  quant::QuantConfig qc;
  qc.group_size = 16;
  qc.bits = 3;
  const double q3 = evaluate(quant::quantize_model(t.ckpt, t.calib, qc), t.val).ce;
  qc.bits = 4;
  const double q4 = evaluate(quant::quantize_model(t.ckpt, t.calib, qc), t.val).ce;
  EXPECT_GT(relative_ce_error(q3, fp), relative_ce_error(q4, fp));
}

TEST(QuantizeModel, RtnIgnoresCalibration) {
  const auto& t = trained();
  quant::QuantConfig qc;
  qc.method = quant::Method::kRtn;
  qc.group_size = 8;
  const auto a = quant::quantize_model(t.ckpt, t.calib, qc);
  const auto b = quant::quantize_model(t.ckpt, data::CalibrationSet{}, qc);
  EXPECT_EQ(a.layers, b.layers);
  ASSERT_FALSE(b.reports.empty());
  EXPECT_TRUE(std::isnan(b.reports.front().reconstruction_error));
}

TEST(QuantizeModel, PropagationChangesLaterLayers) {
  const auto& t = trained();
  quant::QuantConfig on;
  on.bits = 3;
  on.group_size = 8;
  quant::QuantConfig off = on;
  off.propagate_quantized = false;
  const auto a = quant::quantize_model(t.ckpt, t.calib, on);
  const auto b = quant::quantize_model(t.ckpt, t.calib, off);
  EXPECT_EQ(a.layers.at("blocks.0.attn.q"), b.layers.at("blocks.0.attn.q"));
  EXPECT_NE(a.layers.at("blocks.1.mlp.down"), b.layers.at("blocks.1.mlp.down"));
  EXPECT_EQ(a.reports.size(), model::quantizable_layers(t.ckpt.config).size());
}

TEST(QuantizeModel, PassthroughKeepsNonLinearTensors) {
  const auto& t = trained();
  quant::QuantConfig qc;
  qc.group_size = 16;
  const auto qm = quant::quantize_model(t.ckpt, t.calib, qc);
  const auto deq = quant::dequantize_model(qm);
  EXPECT_EQ(deq.at("tok_emb"), t.ckpt.at("tok_emb"));
  EXPECT_EQ(deq.at("unembed"), t.ckpt.at("unembed"));
  EXPECT_NE(deq.at("blocks.0.mlp.up"), t.ckpt.at("blocks.0.mlp.up"));
}

}  // namespace
}  // namespace qlab::metrics
