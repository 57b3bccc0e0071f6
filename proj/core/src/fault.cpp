#include "bnn/fault.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "bnn/rng.hpp"

namespace bnn {

void FaultSpec::validate() const {
  if (!(p >= 0.0 && p <= 1.0))
    throw InvalidRate("FaultSpec: p = " + std::to_string(p) +
                      " outside [0,1]");
}

bool FaultSpec::layer_in_scope(std::size_t layer_index) const {
  if (scope.empty()) return true;
  return std::find(scope.begin(), scope.end(), layer_index) != scope.end();
}

std::size_t FlipMask::set_bits() const {
  std::size_t n = 0;
  for (const auto& m : layers)
    for (std::uint64_t w : m.words()) n += std::popcount(w);
  return n;
}

std::size_t FlipMask::total_bits() const {
  std::size_t n = 0;
  for (const auto& m : layers) n += m.rows() * m.cols();
  return n;
}

std::vector<LayerShape> layer_shapes(const BnnModel& model) {
  std::vector<LayerShape> shapes;
  shapes.reserve(model.layers.size());
  for (const auto& l : model.layers)
    shapes.push_back({l.weights.rows(), l.weights.cols()});
  return shapes;
}

FlipMask sample_mask(const FaultSpec& spec, std::span<const LayerShape> shapes,
                     std::string_view stream) {
  spec.validate();
  if (shapes.empty()) throw InvalidRate("sample_mask: no layer shapes");

  FlipMask mask;
  mask.layers.reserve(shapes.size());

  // Bernoulli by threshold on the top 53 bits of each u64 draw, so the
  // sampled fraction tracks p to within 2^-53 and p = 0 / p = 1 are exact.
  const double clamped = std::clamp(spec.p, 0.0, 1.0);
  const auto threshold =
      static_cast<std::uint64_t>(std::llround(clamped * 0x1.0p53));

  for (std::size_t k = 0; k < shapes.size(); ++k) {
    BitMatrix m(shapes[k].rows, shapes[k].cols);
    if (spec.layer_in_scope(k) && spec.p > 0.0) {
      rng::Stream rs(rng::derive(spec.seed, stream),
                     "layer-" + std::to_string(k));
      const std::size_t cols = shapes[k].cols;
      const std::size_t row_words = m.row_words();
      const auto words = m.mutable_words();
      for (std::size_t r = 0; r < shapes[k].rows; ++r) {
        std::uint64_t* row = words.data() + r * row_words;
        for (std::size_t c = 0; c < cols; ++c) {
          if ((rs.next_u64() >> 11) < threshold)
            row[c / 64] |= std::uint64_t{1} << (c % 64);
        }
      }
    }
    mask.layers.push_back(std::move(m));
  }
  return mask;
}

BitMatrix apply_flips(const BitMatrix& weights, const BitMatrix& mask) {
  if (weights.rows() != mask.rows() || weights.cols() != mask.cols())
    throw DimensionMismatch(
        "apply_flips: weights " + std::to_string(weights.rows()) + "x" +
        std::to_string(weights.cols()) + " vs mask " +
        std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  BitMatrix out = weights;
  const auto mw = mask.words();
  const auto ow = out.mutable_words();
  for (std::size_t i = 0; i < ow.size(); ++i) ow[i] ^= mw[i];
  return out;
}

BnnModel corrupt_model(const BnnModel& model, const FaultSpec& spec,
                       std::string_view stream) {
  spec.validate();
  const auto shapes = layer_shapes(model);
  const FlipMask mask = sample_mask(spec, shapes, stream);
  BnnModel out = model;
  for (std::size_t k = 0; k < out.layers.size(); ++k)
    if (spec.layer_in_scope(k))
      out.layers[k].weights = apply_flips(model.layers[k].weights,
                                          mask.layers[k]);
  return out;
}

}  // namespace bnn
