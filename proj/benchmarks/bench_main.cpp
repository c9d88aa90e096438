#include <benchmark/benchmark.h>

#include "malvis/binviz.hpp"
#include "malvis/corpus.hpp"
#include "malvis/lz.hpp"
#include "malvis/nn.hpp"
#include "malvis/rng.hpp"
#include "malvis/xai.hpp"

using namespace malvis;

namespace {

std::vector<InputTensor> random_batch(std::size_t n, std::size_t side) {
  Rng rng(1);
  std::vector<InputTensor> out(n);
  for (auto& t : out) {
    t.side = side;
    t.values.resize(side * side);
    for (auto& v : t.values) v = static_cast<float>(rng.uniform());
  }
  return out;
}

const Binary& sample() {
  static const Binary b = generate_family(default_family_specs()[0], 1, 3)[0];
  return b;
}

void BM_ForwardEval(benchmark::State& state) {
  const nn::Model m(nn::Hyperparams{}, {"a", "b", "c", "d", "e"}, 1);
  const auto batch = random_batch(static_cast<std::size_t>(state.range(0)), 64);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_eval(batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardEval)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  nn::Model m(nn::Hyperparams{}, {"a", "b", "c", "d", "e"}, 1);
  auto opt = nn::OptimizerState<float>::for_model(m);
  const auto batch = random_batch(32, 64);
  std::vector<int> labels(32);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 5);
  for (auto _ : state) benchmark::DoNotOptimize(nn::train_step(m, opt, batch, labels));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_LzCompress(benchmark::State& state) {
  const Bytes body = serialize_body(sample());
  for (auto _ : state) benchmark::DoNotOptimize(lz::compress(body));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(body.size()));
}
BENCHMARK(BM_LzCompress);

void BM_LzDecompress(benchmark::State& state) {
  const Bytes body = serialize_body(sample());
  const Bytes packed = lz::compress(body);
  for (auto _ : state) benchmark::DoNotOptimize(lz::decompress(packed, body.size()));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(body.size()));
}
BENCHMARK(BM_LzDecompress);

void BM_BinaryToInput(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(resize_to_input(binary_to_image(sample()), 64));
}
BENCHMARK(BM_BinaryToInput);

void BM_KernelShapSolve(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  std::vector<double> w(m);
  for (auto& x : w) x = rng.normal();
  const xai::BatchValueFn v = [&](const std::vector<xai::Coalition>& cs) {
    std::vector<double> out;
    out.reserve(cs.size());
    for (const auto& c : cs) {
      double t = 0;
      for (std::size_t i = 0; i < m; ++i) t += c[i] ? w[i] : 0.0;
      out.push_back(std::tanh(t));
    }
    return out;
  };
  for (auto _ : state) benchmark::DoNotOptimize(xai::kernel_shap_values(m, v, 2048, 3));
}
BENCHMARK(BM_KernelShapSolve)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
