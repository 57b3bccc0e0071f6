#pragma once

#include <cstdint>
#include <string>

namespace bnn {

struct KernelBenchResult {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t packed_passes = 0;     // matvec passes timed per kernel
  std::size_t reference_passes = 0;
  double packed_elems_per_s = 0.0;     // weight elements consumed per second
  double reference_elems_per_s = 0.0;
  double speedup = 0.0;                // packed / reference
  std::int64_t checksum = 0;           // anti-DCE, also equality-checked
};

// Times binary_matvec against the plain-integer reference on the same
// random +-1 problem; throws ConsistencyError if they ever disagree.
// Each kernel runs for at least min_seconds of wall time.
KernelBenchResult bench_kernels(std::size_t rows, std::size_t cols,
                                double min_seconds, std::uint64_t seed);

std::string format_kernel_bench(const KernelBenchResult& result);

}  // namespace bnn
