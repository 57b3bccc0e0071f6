#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bnn/bitlinalg.hpp"
#include "bnn/errors.hpp"

namespace bnn {

// Trained normalization parameters for one layer, expressed over the
// popcount domain (the integer s = POPCOUNT(XNOR(w, x)) per neuron).
struct BatchNormStats {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double epsilon = 1e-5;
};

// One fully connected binary layer after threshold folding. The
// neuron fires (+1) iff threshold_sign * (popcount - threshold) > 0.
struct DenseLayer {
  BitMatrix weights;                      // out_features x in_features
  std::vector<double> thresholds;         // per neuron, popcount domain
  std::vector<std::int8_t> threshold_sign;  // +1 or -1 per neuron

  std::size_t in_features() const noexcept { return weights.cols(); }
  std::size_t out_features() const noexcept { return weights.rows(); }

  void validate() const;
};

enum class OutputMode : std::uint32_t {
  // Hidden layers emit bits; the last layer emits integer scores and
  // the class is the argmax.
  kBinaryHiddenIntegerLogits = 0,
};

struct BnnModel {
  std::vector<DenseLayer> layers;
  double input_binarization_threshold = 0.5;
  std::uint32_t n_classes = 0;
  OutputMode output_mode = OutputMode::kBinaryHiddenIntegerLogits;

  std::size_t input_size() const {
    return layers.empty() ? 0 : layers.front().in_features();
  }
  void validate() const;
};

// sign with the tie broken upward: +1 for w >= 0, -1 otherwise.
int binarize_real(double w);

// bit i set iff pixels[i] >= threshold; pixels must lie in [0, 1].
BitVector binarize_input(std::span<const float> pixels, double threshold);

// One layer of Eq-style inference: popcounts, then per-neuron
// threshold comparison.
BitVector layer_forward(const DenseLayer& layer, const BitVector& x);

struct FoldedThresholds {
  std::vector<double> thresholds;
  std::vector<std::int8_t> signs;
  std::vector<std::size_t> degenerate;  // neurons with gamma == 0
};

// Collapse batch-norm into a (threshold, sign) pair per neuron so that
// for every integer popcount s:
//   sign * (s - threshold) > 0   iff   gamma*(s - mean)/sqrt(var+eps) + beta > 0
// Neurons with gamma == 0 are recorded in `degenerate` and pinned to a
// constant -1 output (sign +1, threshold above any reachable popcount).
FoldedThresholds fold_batchnorm_to_threshold(const BatchNormStats& stats,
                                             std::size_t fan_in);

// Full-model inference: binarize, run hidden layers, score the last
// layer as sign*(signed_dot - dot-domain threshold), argmax with ties
// to the lowest class index.
int model_forward(const BnnModel& model, std::span<const float> image);

// Last-layer scores for one already-binarized input (exposed for
// diagnostics and tests).
std::vector<double> model_scores(const BnnModel& model, const BitVector& input);

// Fixed little-endian binary model container; layout documented in
// docs/model-format.md.
void save_model(const BnnModel& model, const std::string& path);
BnnModel load_model(const std::string& path);

}  // namespace bnn
