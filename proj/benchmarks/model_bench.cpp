#include <benchmark/benchmark.h>

#include <random>

#include "qlab/model.hpp"

namespace {

using namespace qlab;

model::ModelConfig shape(bool desk) {
  model::ModelConfig c;
  if (!desk) {
    c.d_model = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_ff = 256;
    c.seq_len = 128;
  }
  return c;
}

data::Batch batch(const model::ModelConfig& c, std::size_t n) {
  std::mt19937_64 rng(1);
  data::Batch b;
  b.batch = n;
  b.seq_len = c.seq_len;
  for (std::size_t i = 0; i < n * c.seq_len; ++i) {
    b.inputs.push_back(static_cast<data::TokenId>(rng() % c.vocab));
    b.targets.push_back(static_cast<data::TokenId>(rng() % c.vocab));
  }
  return b;
}

// Arg 0: tiny profile, 1: desk profile; one micro-batch of 16 sequences.
void BM_Forward(benchmark::State& state) {
  const auto cfg = shape(state.range(0) != 0);
  const auto ck = model::init<float>(cfg);
  const auto b = batch(cfg, 16);
  for (auto _ : state) benchmark::DoNotOptimize(model::forward(ck, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(b.positions()));
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
  const auto cfg = shape(state.range(0) != 0);
  const auto ck = model::init<float>(cfg);
  const auto b = batch(cfg, 16);
  for (auto _ : state) {
    const auto fwd = model::forward(ck, b);
    benchmark::DoNotOptimize(model::backward(ck, b, fwd));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(b.positions()));
}
BENCHMARK(BM_ForwardBackward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
