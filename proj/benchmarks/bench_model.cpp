#include <benchmark/benchmark.h>

#include "mhl/masking.hpp"
#include "mhl/model.hpp"
#include "mhl/rng.hpp"

namespace {

mhl::ModelConfig bench_config(int K) {
  mhl::ModelConfig c;
  c.codebook_sizes.assign(static_cast<std::size_t>(K), 64);
  c.hidden_size = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.ffn_dim = 256;
  c.max_seq_len = 64;
  c.dropout = 0.1;
  return c;
}

std::vector<mhl::SemanticId> random_items(int T, int K, mhl::Rng& rng) {
  std::vector<mhl::SemanticId> s(static_cast<std::size_t>(T));
  for (auto& id : s)
    for (int k = 0; k < K; ++k) id.codewords.push_back(static_cast<int>(mhl::uniform_int(rng, 0, 63)));
  return s;
}

void BM_Forward(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  mhl::Model model(bench_config(8));
  model.init_parameters(1);
  mhl::Rng rng = mhl::make_rng(2, {0});
  const auto seq = mhl::MaskedSequence::unmasked(random_items(T, 8, rng));
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(seq, nullptr));
  state.SetItemsProcessed(state.iterations() * T);
}
BENCHMARK(BM_Forward)->Arg(10)->Arg(30)->Arg(50);

// Forward + backward over a batch of 32, half the codewords eligible for masking.
void BM_BatchLossGrad(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const int K = 8;
  mhl::Model model(bench_config(K));
  model.init_parameters(1);
  mhl::Rng rng = mhl::make_rng(3, {0});
  std::vector<mhl::TrainSequence> batch;
  for (int b = 0; b < 32; ++b) {
    const auto items = random_items(T, K, rng);
    const auto plan = mhl::plan_random(T, K, 0.5, mhl::Granularity::kToken, rng);
    batch.push_back({mhl::apply_mask(items, plan, K), static_cast<std::uint64_t>(b)});
  }
  Eigen::VectorXd grad;
  for (auto _ : state) {
    auto l = mhl::batch_loss(model, batch, {}, true, &grad);
    benchmark::DoNotOptimize(l.total);
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_BatchLossGrad)->Arg(10)->Arg(30)->Unit(benchmark::kMillisecond);

void BM_Entropy(benchmark::State& state) {
  const int K = 8;
  mhl::Model model(bench_config(K));
  model.init_parameters(1);
  mhl::Rng rng = mhl::make_rng(4, {0});
  const auto items = random_items(30, K, rng);
  for (auto _ : state) benchmark::DoNotOptimize(mhl::compute_entropy(model, items));
}
BENCHMARK(BM_Entropy);

}  // namespace

BENCHMARK_MAIN();
