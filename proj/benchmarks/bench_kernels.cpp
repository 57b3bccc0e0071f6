// Microbenchmarks for the packed kernels and the fault sampler. The
// interesting comparison is BM_binary_matvec vs BM_reference_dot at the
// same logical size: the packed path should win by well over an order
// of magnitude on any machine with a hardware popcount.

#include <benchmark/benchmark.h>

#include <vector>

#include "bnn/bitlinalg.hpp"
#include "bnn/fault.hpp"
#include "bnn/rng.hpp"

namespace {

std::vector<std::int8_t> random_signs(std::size_t n, bnn::rng::Stream& stream) {
  std::vector<std::int8_t> out(n);
  for (auto& v : out) v = stream.next_u64() & 1 ? 1 : -1;
  return out;
}

void BM_binary_matvec(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  bnn::rng::Stream stream(7, "bench-matvec");
  bnn::BitMatrix w(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    w.set_row(r, bnn::pack_signs(random_signs(cols, stream)));
  }
  const bnn::BitVector x = bnn::pack_signs(random_signs(cols, stream));

  for (auto _ : state) {
    benchmark::DoNotOptimize(bnn::binary_matvec(w, x));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(rows * cols));
}

void BM_reference_dot(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  bnn::rng::Stream stream(7, "bench-reference");
  const auto w = random_signs(rows * cols, stream);
  const auto x = random_signs(cols, stream);

  for (auto _ : state) {
    std::int64_t sum = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      sum += bnn::reference_dot({w.data() + r * cols, cols}, x);
    }
    benchmark::DoNotOptimize(sum);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(rows * cols));
}

void BM_xnor_popcount(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  bnn::rng::Stream stream(7, "bench-xnor");
  const bnn::BitVector a = bnn::pack_signs(random_signs(n, stream));
  const bnn::BitVector b = bnn::pack_signs(random_signs(n, stream));
  for (auto _ : state) {
    benchmark::DoNotOptimize(bnn::xnor_popcount(a, b));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(n));
}

void BM_sample_mask(benchmark::State& state) {
  const double p = static_cast<double>(state.range(0)) / 1000.0;
  const std::vector<bnn::LayerShape> shapes{{256, 784}, {256, 256}, {10, 256}};
  bnn::FaultSpec spec;
  spec.p = p;
  spec.seed = 11;
  std::size_t iter = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        bnn::sample_mask(spec, shapes, "bench-" + std::to_string(iter++)));
  }
}

}  // namespace

BENCHMARK(BM_binary_matvec)->Args({256, 784})->Args({256, 4096});
BENCHMARK(BM_reference_dot)->Args({256, 784})->Args({256, 4096});
BENCHMARK(BM_xnor_popcount)->Arg(784)->Arg(4096)->Arg(65536);
BENCHMARK(BM_sample_mask)->Arg(0)->Arg(150)->Arg(500);

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  return 0;
}
