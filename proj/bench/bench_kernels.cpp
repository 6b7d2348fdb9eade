#include <benchmark/benchmark.h>

#include <vector>

#include "whisq/kernels.hpp"
#include "whisq/rng.hpp"
#include "whisq/sinkhorn.hpp"

namespace {

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  whisq::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, {n, n, n});
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <auto Kernel>
void BM_half_sq_dist(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 512, m = n / 4;
  const auto x = random_buffer(n * d, 3), y = random_buffer(m * d, 4);
  std::vector<double> c(n * m);
  for (auto _ : state) {
    Kernel(x, y, c, n, m, d);
    benchmark::DoNotOptimize(c.data());
  }
}

template <auto Batch>
void BM_sinkhorn_batch(benchmark::State& state) {
  const auto items = static_cast<std::size_t>(state.range(0));
  std::vector<whisq::Tensor> xs, ys;
  for (std::size_t i = 0; i < items; ++i) {
    xs.emplace_back(std::vector<std::size_t>{40, 16}, random_buffer(40 * 16, 10 + i));
    ys.emplace_back(std::vector<std::size_t>{8, 16}, random_buffer(8 * 16, 1000 + i));
  }
  std::vector<whisq::ot::OtItem> batch;
  for (std::size_t i = 0; i < items; ++i) batch.push_back({&xs[i], &ys[i]});
  const whisq::ot::SinkhornOptions opts;
  for (auto _ : state) {
    auto r = Batch(batch, opts, false, true);
    benchmark::DoNotOptimize(r.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul<whisq::kernels::serial::matmul>)->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<whisq::kernels::parallel::matmul>)->Arg(64)->Arg(256);
BENCHMARK(BM_half_sq_dist<whisq::kernels::serial::half_sq_dist>)->Arg(400)->Arg(1500);
BENCHMARK(BM_half_sq_dist<whisq::kernels::parallel::half_sq_dist>)->Arg(400)->Arg(1500);
BENCHMARK(BM_sinkhorn_batch<whisq::ot::serial::sinkhorn_batch>)->Arg(16);
BENCHMARK(BM_sinkhorn_batch<whisq::ot::parallel::sinkhorn_batch>)->Arg(16);
BENCHMARK_MAIN();
