// Serial reference kernels against the OpenMP ones, plus a batched encoder
// forward at the default toy size. Run with --benchmark_filter to narrow.

#include <benchmark/benchmark.h>

#include <vector>

#include "dra/encoder.hpp"
#include "dra/kernels.hpp"
#include "dra/parallel.hpp"
#include "dra/rng.hpp"

namespace {

using namespace dra;

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}

template <auto Kernel>
void BM_matmul_at_b(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 3), g = filled(n * n, 4);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, g, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}

template <auto Kernel>
void BM_softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 64;
  const auto in = filled(rows * cols, 5);
  std::vector<double> out(rows * cols);
  for (auto _ : state) {
    Kernel(in, out, rows, cols);
    benchmark::DoNotOptimize(out.data());
  }
}

BENCHMARK(BM_matmul<kernels::reference::matmul>)->Name("matmul/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul<kernels::omp::matmul>)->Name("matmul/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul_at_b<kernels::reference::matmul_at_b_acc>)->Name("matmul_at_b/serial")->Range(64, 256);
BENCHMARK(BM_matmul_at_b<kernels::omp::matmul_at_b_acc>)->Name("matmul_at_b/omp")->Range(64, 256);
BENCHMARK(BM_softmax<kernels::reference::softmax_rows>)->Name("softmax/serial")->Range(64, 4096);
BENCHMARK(BM_softmax<kernels::omp::softmax_rows>)->Name("softmax/omp")->Range(64, 4096);

// 32 images through the default encoder, one thread vs all of them.
void BM_embed_batch(benchmark::State& state) {
  EncoderConfig cfg;
  ToyClipModel model = ToyClipModel::create(cfg, 1);
  Rng rng(9);
  std::vector<Tensor> images;
  for (int i = 0; i < 32; ++i) {
    Tensor t = Tensor::matrix(cfg.image_tokens, cfg.input_dim);
    for (double& v : t.storage()) v = rng.normal();
    images.push_back(std::move(t));
  }
  const int before = kernels::max_threads();
  kernels::set_threads(static_cast<int>(state.range(0)) == 0 ? before : 1);
  for (auto _ : state) {
    std::vector<Tensor> out(images.size());
    parallel_for(images.size(), [&](std::size_t i) { out[i] = embed_image(model, images[i]); });
    benchmark::DoNotOptimize(out.data());
  }
  kernels::set_threads(before);
}
BENCHMARK(BM_embed_batch)->Arg(1)->Arg(0)->ArgNames({"all_threads_if_0"})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
