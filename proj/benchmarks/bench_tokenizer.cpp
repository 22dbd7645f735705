#include <benchmark/benchmark.h>

#include "mhl/rng.hpp"
#include "mhl/tokenizer.hpp"

namespace {

Eigen::MatrixXd random_points(int n, int d) {
  mhl::Rng rng = mhl::make_rng(11, {0});
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = mhl::normal01(rng);
  return x;
}

void BM_KMeans(benchmark::State& state) {
  const auto x = random_points(static_cast<int>(state.range(0)), 8);
  for (auto _ : state) {
    mhl::Rng rng = mhl::make_rng(12, {0});
    benchmark::DoNotOptimize(mhl::kmeans(x, 64, 25, rng));
  }
}
BENCHMARK(BM_KMeans)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_NearestCentroid(benchmark::State& state) {
  const auto c = random_points(256, 8);
  const auto q = random_points(1, 8);
  for (auto _ : state) benchmark::DoNotOptimize(mhl::nearest_centroid(c, q.row(0)));
}
BENCHMARK(BM_NearestCentroid);

}  // namespace

BENCHMARK_MAIN();
