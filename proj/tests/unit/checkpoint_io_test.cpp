#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "qlab/checkpoint_io.hpp"
#include "qlab/error.hpp"
#include "test_support.hpp"

namespace qlab::io {
namespace {

using testing::ScratchDir;

model::Checkpoint sample_checkpoint() {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.seq_len = 8;
  cfg.init_seed = 4;
  cfg.init_std = 0.05;
  model::Checkpoint ck = model::init<float>(cfg);
  ck.step = 1234;
  ck.tokens_seen = 987654321012ULL;
  return ck;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_all(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TEST(Container, EncodeDecodeRoundTrip) {
  TensorFile f;
  f.meta = {{"kind", "test"}, {"note", "two words"}};
  f.tensors.push_back({"a", "f64", 1, 2, std::vector<std::uint8_t>(16, 7)});
  f.tensors.push_back({"b", "u3p", 2, 5, std::vector<std::uint8_t>(4, 1)});
  const TensorFile g = decode(encode(f));
  EXPECT_EQ(g.meta, f.meta);
  ASSERT_EQ(g.tensors.size(), 2u);
  EXPECT_EQ(g.tensor("b").bytes, f.tensors[1].bytes);
  EXPECT_EQ(g.meta_value("note"), "two words");
  EXPECT_THROW(g.meta_value("absent"), FormatError);
}

TEST(Container, HeaderLayout) {
  TensorFile f;
  f.meta = {{"kind", "x"}};
  f.tensors.push_back({"w", "f32", 1, 1, {0, 0, 128, 63}});
  const auto bytes = encode(f);
  const std::string text(bytes.begin(), bytes.end());
  EXPECT_EQ(text.rfind("QLAB1\n@kind x\nw f32 1 1 0\n\n", 0), 0u);
  EXPECT_EQ(text.back(), '\n');
  EXPECT_EQ(text.size(), std::string("QLAB1\n@kind x\nw f32 1 1 0\n\n").size() + 4 + 17);
}

TEST(Container, PayloadSizes) {
  EXPECT_EQ(payload_size("f32", 3, 5), 60u);
  EXPECT_EQ(payload_size("f64", 3, 5), 120u);
  EXPECT_EQ(payload_size("u8", 3, 5), 15u);
  EXPECT_EQ(payload_size("u3p", 3, 5), 6u);  // 15 bits → 2 bytes per row
  EXPECT_THROW(payload_size("f16", 1, 1), FormatError);
  EXPECT_THROW(payload_size("u9p", 1, 1), FormatError);
}

TEST(Container, RejectsMalformedInput) {
  TensorFile f;
  f.tensors.push_back({"bad name", "f32", 1, 1, std::vector<std::uint8_t>(4)});
  EXPECT_THROW(encode(f), ContractViolation);
  f.tensors[0] = {"ok", "f32", 1, 2, std::vector<std::uint8_t>(4)};
  EXPECT_THROW(encode(f), ContractViolation);
  EXPECT_THROW(decode(std::vector<std::uint8_t>{'Q', 'L'}), FormatError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ScratchDir dir;
  const model::Checkpoint ck = sample_checkpoint();
  save_checkpoint(dir / "ckpt_1234.qlab", ck);
  const model::Checkpoint back = load_checkpoint(dir / "ckpt_1234.qlab");
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.step, ck.step);
  EXPECT_EQ(back.tokens_seen, ck.tokens_seen);
  EXPECT_EQ(back.tensors, ck.tensors);
}

TEST(Checkpoint, CorruptedPayloadOrFooterIsDetected) {
  ScratchDir dir;
  const auto path = dir / "c.qlab";
  save_checkpoint(path, sample_checkpoint());
  const auto good = read_all(path);
  const std::string text(good.begin(), good.end());
  const std::size_t payload_start = text.find("\n\n") + 2;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto bytes = good;
    const std::size_t pos = payload_start + rng() % (bytes.size() - payload_start - 1);
    bytes[pos] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    write_all(path, bytes);
    EXPECT_THROW(load_checkpoint(path), FormatError) << "byte " << pos;
  }
  auto truncated = good;
  truncated.resize(good.size() - 1);
  write_all(path, truncated);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  auto extended = good;
  extended.push_back('x');
  write_all(path, extended);
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(Checkpoint, TamperedTensorTableIsDetected) {
  ScratchDir dir;
  const auto path = dir / "c.qlab";
  save_checkpoint(path, sample_checkpoint());
  const auto good = read_all(path);
  std::string text(good.begin(), good.end());
  const auto at = text.find("unembed f32 256 8");
  ASSERT_NE(at, std::string::npos);
  text.replace(at, 17, "unembed f32 255 8");
  write_all(path, {text.begin(), text.end()});
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(Checkpoint, WrongKindIsRejected) {
  ScratchDir dir;
  const model::Checkpoint ck = sample_checkpoint();
  save_optimizer_state(dir / "o.qlab", optim::init_state(ck), data::BatchCursor{5});
  EXPECT_THROW(load_checkpoint(dir / "o.qlab"), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.qlab"), FormatError);
}

TEST(OptimizerState, RoundTripIncludesCursor) {
  ScratchDir dir;
  const model::Checkpoint ck = sample_checkpoint();
  optim::OptimState st = optim::init_state(ck);
  st.t = 17;
  st.m.at("unembed")(0, 1) = 0.25f;
  st.v.at("tok_emb")(3, 2) = 1e-7f;
  save_optimizer_state(dir / "x.opt.qlab", st, data::BatchCursor{123456});
  const auto [back, cursor] = load_optimizer_state(dir / "x.opt.qlab");
  EXPECT_EQ(back.t, 17u);
  EXPECT_EQ(back.m, st.m);
  EXPECT_EQ(back.v, st.v);
  EXPECT_EQ(cursor.windows_consumed, 123456u);
  EXPECT_EQ(optimizer_path_for("run/ckpt_100.qlab"), std::filesystem::path("run/ckpt_100.opt.qlab"));
}

TEST(Quantized, RoundTripPreservesCodesAndGrids) {
  ScratchDir dir;
  const model::Checkpoint ck = sample_checkpoint();
  quant::QuantConfig qc;
  qc.bits = 3;
  qc.group_size = 4;
  qc.method = quant::Method::kRtn;
  const auto qm = quant::quantize_model(ck, data::CalibrationSet{}, qc, "abc123");
  save_quantized(dir / "q.qlab", qm);
  const auto back = load_quantized(dir / "q.qlab");
  EXPECT_EQ(back.layers, qm.layers);
  EXPECT_EQ(back.passthrough, qm.passthrough);
  EXPECT_EQ(back.config, qm.config);
  EXPECT_EQ(back.step, ck.step);
  EXPECT_EQ(back.source_id, "abc123");
  EXPECT_EQ(back.qcfg.bits, 3u);
  EXPECT_EQ(back.qcfg.method, quant::Method::kRtn);
  EXPECT_EQ(quant::dequantize_model(back).tensors, quant::dequantize_model(qm).tensors);
  EXPECT_THROW(load_checkpoint(dir / "q.qlab"), FormatError);
}

}  // namespace
}  // namespace qlab::io
