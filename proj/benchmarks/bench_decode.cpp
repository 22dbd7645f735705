#include <benchmark/benchmark.h>

#include "mhl/decode.hpp"
#include "mhl/rng.hpp"

namespace {

constexpr int kK = 8;
constexpr int kW = 64;

struct Fixture {
  mhl::Model model;
  mhl::Catalog catalog;
  mhl::ItemGraph graph;
  std::vector<mhl::SemanticId> context;

  explicit Fixture(std::size_t n_items) : model(config()), catalog(make_catalog(n_items)) {
    model.init_parameters(7);
    graph = mhl::build_token_graph(catalog, 50);
    mhl::Rng rng = mhl::make_rng(8, {0});
    for (int t = 0; t < 20; ++t) context.push_back(catalog.id(static_cast<mhl::ItemIndex>(mhl::uniform_int(rng, 0, n_items - 1))));
  }

  static mhl::ModelConfig config() {
    mhl::ModelConfig c;
    c.codebook_sizes.assign(kK, kW);
    c.hidden_size = 64;
    c.n_layers = 2;
    c.n_heads = 4;
    c.ffn_dim = 256;
    c.max_seq_len = 64;
    c.dropout = 0.0;
    return c;
  }

  static mhl::Catalog make_catalog(std::size_t n) {
    mhl::Rng rng = mhl::make_rng(9, {0});
    std::vector<std::string> ids;
    std::vector<mhl::SemanticId> sids;
    for (std::size_t i = 0; i < n; ++i) {
      mhl::SemanticId id;
      for (int k = 0; k < kK; ++k) id.codewords.push_back(static_cast<int>(mhl::uniform_int(rng, 0, kW - 1)));
      ids.push_back("i" + std::to_string(i));
      sids.push_back(std::move(id));
    }
    return mhl::Catalog(ids, sids, std::vector<int>(kK, kW), false);
  }
};

void BM_RankExact(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(mhl::rank_exact(f.model, f.context, f.catalog, 10));
}
BENCHMARK(BM_RankExact)->Arg(500)->Arg(5000)->Unit(benchmark::kMicrosecond);

void BM_BeamSearch(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  const mhl::CodewordIndex index(f.catalog);
  const mhl::BeamConfig cfg{50, 3, 4, 1};
  for (auto _ : state)
    benchmark::DoNotOptimize(mhl::beam_search_graph(f.model, f.context, f.catalog, f.graph, index, cfg, 10));
}
BENCHMARK(BM_BeamSearch)->Arg(500)->Arg(5000)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
