// Forward, JVP and training-step throughput at the default desk-scale shapes.

#include <benchmark/benchmark.h>

#include "causaltok/argen.hpp"
#include "causaltok/data.hpp"
#include "causaltok/metrics.hpp"
#include "causaltok/sampling.hpp"
#include "causaltok/traintok.hpp"

using namespace causaltok;

namespace {

TokenizerConfig default_tokenizer() { return TokenizerConfig{}; }

StubVfmConfig vfm_config(const TokenizerConfig& cfg) {
  StubVfmConfig v;
  v.image = cfg.encoder.image;
  v.patch_size = cfg.encoder.patch_size;
  v.dim = cfg.vfm_dim;
  return v;
}

void BM_Encode(benchmark::State& state) {
  Rng rng(1);
  const auto cfg = default_tokenizer();
  Encoder enc(cfg.encoder, rng);
  const Matrix img = synthetic_dataset(SyntheticConfig{cfg.encoder.image, 1, 7})[0].image;
  for (auto _ : state) benchmark::DoNotOptimize(enc.encode(img).tokens);
}
BENCHMARK(BM_Encode);

void BM_DecodeVelocity(benchmark::State& state) {
  Rng rng(2);
  const auto cfg = default_tokenizer();
  Decoder dec(cfg.decoder, rng);
  const Matrix z = rng.normal_matrix(3, cfg.decoder.latent.pixels());
  const Matrix tokens = normalize_tokens(rng.normal_matrix(16, 16));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        decode_velocity(dec, z, TimePair::make(0.2, 0.8), TokenConditionData::all(tokens)).u);
  }
}
BENCHMARK(BM_DecodeVelocity);

void BM_DecoderJvp(benchmark::State& state) {
  Rng rng(3);
  const auto cfg = default_tokenizer();
  Decoder dec(cfg.decoder, rng);
  const Matrix z = rng.normal_matrix(3, cfg.decoder.latent.pixels());
  const Matrix v = rng.normal_matrix(3, cfg.decoder.latent.pixels());
  const Matrix tokens = normalize_tokens(rng.normal_matrix(16, 16));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        jvp_decoder(dec, z, TimePair::make(0.2, 0.8), TokenConditionData::all(tokens), v).du);
  }
}
BENCHMARK(BM_DecoderJvp);

void BM_TrainStep(benchmark::State& state) {
  const auto cfg = default_tokenizer();
  TokenizerTrainConfig tc;
  tc.schedule.batch_size = static_cast<int>(state.range(0));
  TrainState ts(cfg, tc.adam, 4);
  const StubVfm vfm(vfm_config(cfg));
  const auto data = synthetic_dataset(SyntheticConfig{cfg.encoder.image, tc.schedule.batch_size, 7});
  ts.epoch = tc.schedule.interval_start_epoch;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(ts, data, vfm, tc, 1000).losses.total);
  state.SetItemsProcessed(state.iterations() * tc.schedule.batch_size);
}
BENCHMARK(BM_TrainStep)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_OneStepReconstruct(benchmark::State& state) {
  Rng rng(5);
  const auto cfg = default_tokenizer();
  Decoder dec(cfg.decoder, rng);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(16, 16));
  const Matrix eps = rng.normal_matrix(3, cfg.decoder.latent.pixels());
  for (auto _ : state) benchmark::DoNotOptimize(one_step(dec, tokens, eps));
}
BENCHMARK(BM_OneStepReconstruct);

void BM_ArGenerate(benchmark::State& state) {
  Rng rng(6);
  ARModel ar(ARConfig{}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ar_generate(ar, 0, 2.0, rng));
}
BENCHMARK(BM_ArGenerate)->Unit(benchmark::kMillisecond);

void BM_FrechetDistance(benchmark::State& state) {
  Rng rng(8);
  const Matrix a = rng.normal_matrix(256, 64);
  const Matrix b = rng.normal_matrix(256, 64);
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(a, b));
}
BENCHMARK(BM_FrechetDistance);

}  // namespace

BENCHMARK_MAIN();
