#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "bnn/dataio.hpp"
#include "bnn/fault.hpp"
#include "bnn/model.hpp"

namespace bnn {

struct TrainConfig {
  std::vector<std::size_t> hidden = {256, 256};
  std::size_t n_classes = 10;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double lr_decay = 0.97;  // per-epoch multiplier
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double dropout_rate = 0.2;    // hidden activations, training only
  double p_train = 0.0;         // weight bit error rate during training
  std::uint64_t seed = 1;
  double input_threshold = 0.5;  // input pixel binarization
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;  // running-stat retention per batch
  bool verbose = false;

  void validate() const;
};

// Real-valued twin of a binary layer kept during training. Hidden
// layers carry batch-norm over the signed-dot preactivation; the
// output layer carries a plain per-class bias (folded into the
// exported threshold, so inference argmax matches training logits).
struct ShadowLayer {
  Eigen::MatrixXd w_real;  // out x in, clipped to [-1, 1]
  bool is_output = false;

  Eigen::VectorXd gamma, beta, running_mean, running_var;  // hidden
  Eigen::VectorXd bias;                                    // output

  // Adam first/second moments, one pair per parameter tensor.
  Eigen::MatrixXd m_w, v_w;
  Eigen::VectorXd m_gamma, v_gamma, m_beta, v_beta, m_bias, v_bias;

  std::size_t in_features() const { return static_cast<std::size_t>(w_real.cols()); }
  std::size_t out_features() const { return static_cast<std::size_t>(w_real.rows()); }
};

struct ShadowModel {
  std::vector<ShadowLayer> layers;
  std::int64_t step = 0;  // optimizer steps taken
  double input_threshold = 0.5;
  double bn_epsilon = 1e-5;
  std::uint32_t n_classes = 0;

  std::vector<LayerShape> shapes() const;
};

// kBinary is the training path (sign forwards, straight-through
// backwards). kSurrogate replaces every sign with hard-tanh so the
// same backward pass is the exact gradient of the forward pass; that
// is what the finite-difference test checks.
enum class BinarizeMode { kBinary, kSurrogate };

struct LayerCache {
  Eigen::MatrixXd x_in;       // B x in, inputs as seen by this layer
  Eigen::MatrixXd w_eff;      // out x in, flipped effective weights
  Eigen::MatrixXd flip_sign;  // out x in, +1 / -1 from the mask
  Eigen::MatrixXd xhat;       // B x out, normalized preactivation
  Eigen::VectorXd inv_std;    // out
  Eigen::VectorXd batch_mean, batch_var;  // this batch's statistics
  Eigen::MatrixXd y;          // B x out, post-batch-norm value
  Eigen::MatrixXd dropout;    // B x out, 0 or 1/(1-rate); empty if unused
  Eigen::MatrixXd probs;      // output layer only: softmax probabilities
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  std::vector<int> labels;
  double logit_scale = 1.0;
  std::int64_t step_at_forward = -1;
  std::size_t mask_fingerprint = 0;
  BinarizeMode mode = BinarizeMode::kBinary;
};

struct Gradients {
  struct Layer {
    Eigen::MatrixXd w;             // d loss / d w_real
    Eigen::VectorXd gamma, beta;   // hidden layers
    Eigen::VectorXd bias;          // output layer
  };
  std::vector<Layer> layers;

  bool all_finite() const;
};

ShadowModel init_shadow(const TrainConfig& config, std::size_t input_size);

// Forward pass over one batch of +-1 inputs (B x in). The mask, when
// non-empty, flips the binarized weights for this iteration; the same
// mask value is reused by backward_train. dropout_masks may be null.
double forward_train(const ShadowModel& shadow, const Eigen::MatrixXd& inputs,
                     const std::vector<int>& labels, const FlipMask& mask,
                     BinarizeMode mode,
                     const std::vector<Eigen::MatrixXd>* dropout_masks,
                     ForwardCache& cache);

// Gradients w.r.t. real weights and normalization parameters; the
// chain rule runs through the flipped weights cached by forward_train.
Gradients backward_train(const ShadowModel& shadow, const ForwardCache& cache,
                         const FlipMask& mask);

// Adam update with the given step-size, then clip weights to [-1, 1].
void optimizer_step(ShadowModel& shadow, const Gradients& grads,
                    const TrainConfig& config, double step_size);

struct TrainResult {
  BnnModel model;
  ShadowModel shadow;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

TrainResult train(const Dataset& data, const TrainConfig& config);

// Replaces the running normalization statistics with statistics of the
// binary network's pre-activations over `data`, measured in the model's
// intended operating environment: no dropout, and weight bit flips at
// rate p_train (one deterministic mask per 4096-sample chunk, streams
// "bn-refresh/layer-k/chunk-c"). Training batches see dropout-scaled
// activations, so the momentum average overestimates the deployment
// variance; folding thresholds from it costs accuracy. With p_train = 0
// the passes are exact clean statistics.
void refresh_bn_stats(ShadowModel& shadow, const Dataset& data,
                      double input_threshold, double p_train = 0.0,
                      std::uint64_t seed = 0);

// Binary export of the shadow state: sign weights plus folded
// thresholds; the model carries the intended (error-free) weights.
BnnModel export_model(const ShadowModel& shadow);

// Shadow-state container (weights, normalization, optimizer moments)
// for warm restarts; layout in docs/model-format.md.
void save_checkpoint(const ShadowModel& shadow, const std::string& path);
ShadowModel load_checkpoint(const std::string& path);

// Deterministic per-iteration dropout masks (0 or 1/(1-rate)).
std::vector<Eigen::MatrixXd> make_dropout_masks(const ShadowModel& shadow,
                                                std::size_t batch,
                                                double rate,
                                                std::uint64_t seed,
                                                std::string_view stream);

}  // namespace bnn
