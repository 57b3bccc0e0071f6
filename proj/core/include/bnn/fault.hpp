#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "bnn/bitlinalg.hpp"
#include "bnn/model.hpp"

namespace bnn {

// Stochastic symmetric bit-flip model over stored weights. The flip
// probability is independent of the stored value; per-direction rates
// (distinct LRS->HRS / HRS->LRS probabilities) would slot in here as
// two rates and a weight-aware sampler, but a single rate matches the
// reported per-condition error numbers.
struct FaultSpec {
  double p = 0.0;          // bit error probability, in [0, 1]
  std::uint64_t seed = 0;  // master seed; streams derive sub-seeds
  // Layer indices subject to flips; empty means every layer.
  std::vector<std::size_t> scope;

  void validate() const;
  bool layer_in_scope(std::size_t layer_index) const;
};

struct LayerShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// One bit mask per layer; a set bit means "flip this stored weight".
struct FlipMask {
  std::vector<BitMatrix> layers;

  std::size_t set_bits() const;
  std::size_t total_bits() const;
};

std::vector<LayerShape> layer_shapes(const BnnModel& model);

// Each in-scope bit is set independently with probability spec.p. The
// result is fully determined by (spec.seed, stream, shapes); distinct
// stream labels give independent masks. Out-of-scope layers get
// all-zero masks of the right shape.
FlipMask sample_mask(const FaultSpec& spec, std::span<const LayerShape> shapes,
                     std::string_view stream);

// weights XOR mask; the input is left untouched.
BitMatrix apply_flips(const BitMatrix& weights, const BitMatrix& mask);

// New model with flips applied to every in-scope layer's weights;
// thresholds and signs are untouched.
BnnModel corrupt_model(const BnnModel& model, const FaultSpec& spec,
                       std::string_view stream);

}  // namespace bnn
