#include "bnn/bench.hpp"

#include <chrono>
#include <cstdio>
#include <vector>

#include "bnn/bitlinalg.hpp"
#include "bnn/errors.hpp"
#include "bnn/rng.hpp"

namespace bnn {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

KernelBenchResult bench_kernels(std::size_t rows, std::size_t cols,
                                double min_seconds, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw DimensionMismatch("bench needs rows, cols > 0");
  if (!(min_seconds > 0.0)) min_seconds = 0.2;

  rng::Stream stream(seed, "bench");
  std::vector<std::int8_t> w_flat(rows * cols), x_flat(cols);
  for (auto& v : w_flat) v = stream.next_u64() & 1 ? 1 : -1;
  for (auto& v : x_flat) v = stream.next_u64() & 1 ? 1 : -1;

  BitMatrix w(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    w.set_row(r, pack_signs({w_flat.data() + r * cols, cols}));
  }
  const BitVector x = pack_signs(x_flat);

  // Correctness first: both kernels must produce the same signed dots.
  const auto popcounts = binary_matvec(w, x);
  std::int64_t checksum = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int64_t packed =
        signed_dot_from_popcount(popcounts[r], cols);
    const std::int64_t ref =
        reference_dot({w_flat.data() + r * cols, cols}, x_flat);
    if (packed != ref) {
      throw ConsistencyError("kernel mismatch at row " + std::to_string(r) +
                             ": packed " + std::to_string(packed) +
                             " vs reference " + std::to_string(ref));
    }
    checksum += packed;
  }

  KernelBenchResult result;
  result.rows = rows;
  result.cols = cols;
  result.checksum = checksum;

  const double elems_per_pass = static_cast<double>(rows * cols);

  {
    std::int64_t sink = 0;
    std::size_t passes = 0;
    (void)binary_matvec(w, x);  // warm-up
    const auto t0 = Clock::now();
    double elapsed = 0.0;
    do {
      const auto pc = binary_matvec(w, x);
      for (std::size_t r = 0; r < rows; ++r) sink += pc[r];
      ++passes;
      elapsed = seconds_since(t0);
    } while (elapsed < min_seconds);
    if (sink != static_cast<std::int64_t>(passes) *
                    ((checksum + static_cast<std::int64_t>(rows * cols)) / 2)) {
      // popcounts sum relates to checksum as sum(pc) = (sum(dot) + rows*cols)/2
      throw ConsistencyError("packed kernel drifted during timing");
    }
    result.packed_passes = passes;
    result.packed_elems_per_s = elems_per_pass * static_cast<double>(passes) / elapsed;
  }

  {
    std::int64_t sink = 0;
    std::size_t passes = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      sink += reference_dot({w_flat.data() + r * cols, cols}, x_flat);  // warm-up
    }
    sink = 0;
    const auto t0 = Clock::now();
    double elapsed = 0.0;
    do {
      for (std::size_t r = 0; r < rows; ++r) {
        sink += reference_dot({w_flat.data() + r * cols, cols}, x_flat);
      }
      ++passes;
      elapsed = seconds_since(t0);
    } while (elapsed < min_seconds);
    if (sink != static_cast<std::int64_t>(passes) * checksum) {
      throw ConsistencyError("reference kernel drifted during timing");
    }
    result.reference_passes = passes;
    result.reference_elems_per_s =
        elems_per_pass * static_cast<double>(passes) / elapsed;
  }

  result.speedup = result.packed_elems_per_s / result.reference_elems_per_s;
  return result;
}

std::string format_kernel_bench(const KernelBenchResult& result) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "binary_matvec  %zux%zu  %.3g elem/s  (%zu passes)\n"
                "reference_dot  %zux%zu  %.3g elem/s  (%zu passes)\n"
                "speedup        %.2fx\n",
                result.rows, result.cols, result.packed_elems_per_s,
                result.packed_passes, result.rows, result.cols,
                result.reference_elems_per_s, result.reference_passes,
                result.speedup);
  return buf;
}

}  // namespace bnn
