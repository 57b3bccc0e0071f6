#include "bnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>

#include "bnn/errors.hpp"
#include "bnn/rng.hpp"

namespace bnn {

namespace {

double sign_pm1(double v) { return v >= 0.0 ? 1.0 : -1.0; }

double hard_tanh(double v) { return std::clamp(v, -1.0, 1.0); }

// +-1 matrix from a flip mask layer; bit set means "flip".
Eigen::MatrixXd flip_sign_matrix(const BitMatrix& mask) {
  Eigen::MatrixXd out(mask.rows(), mask.cols());
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    for (std::size_t c = 0; c < mask.cols(); ++c) {
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          mask.get(r, c) ? -1.0 : 1.0;
    }
  }
  return out;
}

std::size_t mask_fingerprint(const FlipMask& mask) {
  // FNV-1a over the packed words; distinguishes masks cheaply so a
  // backward call with a different mask than forward is caught.
  std::size_t h = 1469598103934665603ull;
  for (const auto& layer : mask.layers) {
    for (std::size_t r = 0; r < layer.rows(); ++r) {
      for (std::uint64_t w : layer.row(r)) {
        h ^= static_cast<std::size_t>(w);
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

void check_mask_compatible(const ShadowModel& shadow, const FlipMask& mask) {
  if (mask.layers.empty()) return;  // empty mask == no flips
  if (mask.layers.size() != shadow.layers.size()) {
    throw DimensionMismatch("flip mask has " + std::to_string(mask.layers.size()) +
                            " layers, model has " + std::to_string(shadow.layers.size()));
  }
  for (std::size_t k = 0; k < mask.layers.size(); ++k) {
    if (mask.layers[k].rows() != shadow.layers[k].out_features() ||
        mask.layers[k].cols() != shadow.layers[k].in_features()) {
      throw DimensionMismatch("flip mask layer " + std::to_string(k) +
                              " shape does not match model layer");
    }
  }
}

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_vec(std::ostream& os, const Eigen::VectorXd& v) {
  write_u64(os, static_cast<std::uint64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(sizeof(double)) * v.size());
}
void write_mat(std::ostream& os, const Eigen::MatrixXd& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double)) * m.size());
}

class CheckpointReader {
 public:
  explicit CheckpointReader(std::istream& is) : is_(is) {}

  std::uint32_t u32() { return read_pod<std::uint32_t>(); }
  std::uint64_t u64() { return read_pod<std::uint64_t>(); }
  std::int64_t i64() { return read_pod<std::int64_t>(); }
  double f64() { return read_pod<double>(); }

  Eigen::VectorXd vec() {
    auto n = u64();
    if (n > (1ull << 32)) throw ModelFormatError("checkpoint vector too large", offset_);
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    read_raw(v.data(), sizeof(double) * n);
    return v;
  }

  Eigen::MatrixXd mat() {
    auto r = u64();
    auto c = u64();
    if (r > (1ull << 24) || c > (1ull << 24)) {
      throw ModelFormatError("checkpoint matrix too large", offset_);
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    read_raw(m.data(), sizeof(double) * r * c);
    return m;
  }

  void expect_magic(const char* magic, std::size_t len) {
    std::vector<char> buf(len);
    read_raw(buf.data(), len);
    if (std::memcmp(buf.data(), magic, len) != 0) {
      throw ModelFormatError("bad checkpoint magic", 0);
    }
  }

  std::size_t offset() const { return offset_; }

 private:
  template <typename T>
  T read_pod() {
    T v;
    read_raw(&v, sizeof v);
    return v;
  }

  void read_raw(void* dst, std::size_t n) {
    is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw ModelFormatError("checkpoint truncated", offset_);
    }
    offset_ += n;
  }

  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (hidden.empty()) throw InvalidConfig("at least one hidden layer required");
  for (std::size_t h : hidden) {
    if (h == 0) throw InvalidConfig("hidden layer width must be positive");
  }
  if (n_classes < 2) throw InvalidConfig("n_classes must be at least 2");
  if (epochs == 0) throw InvalidConfig("epochs must be positive");
  if (batch_size == 0) throw InvalidConfig("batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidConfig("learning_rate must be positive and finite");
  }
  if (!(lr_decay > 0.0) || lr_decay > 1.0) {
    throw InvalidConfig("lr_decay must be in (0, 1]");
  }
  if (!(adam_beta1 >= 0.0) || adam_beta1 >= 1.0 || !(adam_beta2 >= 0.0) ||
      adam_beta2 >= 1.0) {
    throw InvalidConfig("adam betas must be in [0, 1)");
  }
  if (!(dropout_rate >= 0.0) || dropout_rate >= 1.0) {
    throw InvalidConfig("dropout_rate must be in [0, 1)");
  }
  if (!(p_train >= 0.0) || p_train > 1.0 || !std::isfinite(p_train)) {
    throw InvalidRate("p_train must be in [0, 1]");
  }
  if (!std::isfinite(input_threshold)) {
    throw InvalidConfig("input_threshold must be finite");
  }
  if (!(bn_epsilon > 0.0)) throw InvalidConfig("bn_epsilon must be positive");
  if (!(bn_momentum >= 0.0) || bn_momentum >= 1.0) {
    throw InvalidConfig("bn_momentum must be in [0, 1)");
  }
}

std::vector<LayerShape> ShadowModel::shapes() const {
  std::vector<LayerShape> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back({l.out_features(), l.in_features()});
  return out;
}

bool Gradients::all_finite() const {
  for (const auto& l : layers) {
    if (!l.w.allFinite()) return false;
    if (l.gamma.size() && !l.gamma.allFinite()) return false;
    if (l.beta.size() && !l.beta.allFinite()) return false;
    if (l.bias.size() && !l.bias.allFinite()) return false;
  }
  return true;
}

ShadowModel init_shadow(const TrainConfig& config, std::size_t input_size) {
  config.validate();
  if (input_size == 0) throw InvalidConfig("input_size must be positive");

  ShadowModel shadow;
  shadow.input_threshold = config.input_threshold;
  shadow.bn_epsilon = config.bn_epsilon;
  shadow.n_classes = static_cast<std::uint32_t>(config.n_classes);

  std::vector<std::size_t> widths;
  widths.push_back(input_size);
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.n_classes);

  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const auto in = static_cast<Eigen::Index>(widths[k]);
    const auto out = static_cast<Eigen::Index>(widths[k + 1]);
    ShadowLayer layer;
    layer.is_output = (k + 2 == widths.size());

    rng::Stream stream(config.seed, "init/layer-" + std::to_string(k));
    const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
    layer.w_real.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) {
        layer.w_real(r, c) = (2.0 * stream.next_unit() - 1.0) * lim;
      }
    }
    layer.m_w = Eigen::MatrixXd::Zero(out, in);
    layer.v_w = Eigen::MatrixXd::Zero(out, in);

    if (layer.is_output) {
      layer.bias = Eigen::VectorXd::Zero(out);
      layer.m_bias = Eigen::VectorXd::Zero(out);
      layer.v_bias = Eigen::VectorXd::Zero(out);
    } else {
      layer.gamma = Eigen::VectorXd::Ones(out);
      layer.beta = Eigen::VectorXd::Zero(out);
      layer.running_mean = Eigen::VectorXd::Zero(out);
      layer.running_var = Eigen::VectorXd::Ones(out);
      layer.m_gamma = Eigen::VectorXd::Zero(out);
      layer.v_gamma = Eigen::VectorXd::Zero(out);
      layer.m_beta = Eigen::VectorXd::Zero(out);
      layer.v_beta = Eigen::VectorXd::Zero(out);
    }
    shadow.layers.push_back(std::move(layer));
  }
  return shadow;
}

double forward_train(const ShadowModel& shadow, const Eigen::MatrixXd& inputs,
                     const std::vector<int>& labels, const FlipMask& mask,
                     BinarizeMode mode,
                     const std::vector<Eigen::MatrixXd>* dropout_masks,
                     ForwardCache& cache) {
  if (shadow.layers.empty()) throw InvalidConfig("shadow model has no layers");
  if (inputs.cols() != static_cast<Eigen::Index>(shadow.layers.front().in_features())) {
    throw DimensionMismatch("batch feature count " + std::to_string(inputs.cols()) +
                            " does not match first layer fan-in " +
                            std::to_string(shadow.layers.front().in_features()));
  }
  if (static_cast<std::size_t>(inputs.rows()) != labels.size()) {
    throw DimensionMismatch("batch has " + std::to_string(inputs.rows()) +
                            " rows but " + std::to_string(labels.size()) + " labels");
  }
  check_mask_compatible(shadow, mask);
  const auto batch = inputs.rows();
  const auto n_layers = shadow.layers.size();
  const bool binary = (mode == BinarizeMode::kBinary);

  cache.layers.assign(n_layers, {});
  cache.labels = labels;
  cache.step_at_forward = shadow.step;
  cache.mask_fingerprint = mask_fingerprint(mask);
  cache.mode = mode;

  Eigen::MatrixXd x = inputs;
  double loss = 0.0;

  for (std::size_t k = 0; k < n_layers; ++k) {
    const ShadowLayer& layer = shadow.layers[k];
    LayerCache& lc = cache.layers[k];
    lc.x_in = x;

    // Binarize (or squash) the shadow weights, then apply this
    // iteration's bit flips as sign changes.
    if (binary) {
      lc.w_eff = layer.w_real.unaryExpr(&sign_pm1);
    } else {
      lc.w_eff = layer.w_real.unaryExpr(&hard_tanh);
    }
    if (mask.layers.empty()) {
      lc.flip_sign.resize(0, 0);
    } else {
      lc.flip_sign = flip_sign_matrix(mask.layers[k]);
      lc.w_eff = lc.w_eff.cwiseProduct(lc.flip_sign);
    }

    Eigen::MatrixXd z = x * lc.w_eff.transpose();  // B x out

    if (layer.is_output) {
      cache.logit_scale = 1.0 / std::sqrt(static_cast<double>(layer.in_features()));
      Eigen::MatrixXd logits =
          cache.logit_scale * (z.rowwise() + layer.bias.transpose());
      // Row-wise stable softmax cross-entropy.
      lc.probs.resize(batch, logits.cols());
      for (Eigen::Index b = 0; b < batch; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= logits.cols()) {
          throw InvalidLabel("label " + std::to_string(y) + " out of range");
        }
        const double mx = logits.row(b).maxCoeff();
        Eigen::ArrayXd e = (logits.row(b).transpose().array() - mx).exp();
        const double denom = e.sum();
        lc.probs.row(b) = (e / denom).matrix().transpose();
        loss += std::log(denom) - (logits(b, y) - mx);
      }
      loss /= static_cast<double>(batch);
    } else {
      // Batch norm over the batch's own statistics (biased variance).
      const Eigen::Index out = z.cols();
      lc.batch_mean = z.colwise().mean().transpose();
      Eigen::MatrixXd centered = z.rowwise() - lc.batch_mean.transpose();
      lc.batch_var =
          centered.array().square().colwise().mean().transpose().matrix();
      lc.inv_std = (lc.batch_var.array() + shadow.bn_epsilon).rsqrt().matrix();
      lc.xhat =
          (centered.array().rowwise() * lc.inv_std.transpose().array()).matrix();
      lc.y = ((lc.xhat.array().rowwise() * layer.gamma.transpose().array())
                  .rowwise() +
              layer.beta.transpose().array())
                 .matrix();

      Eigen::MatrixXd a(batch, out);
      if (binary) {
        a = lc.y.unaryExpr(&sign_pm1);
      } else {
        a = lc.y.unaryExpr(&hard_tanh);
      }
      if (dropout_masks != nullptr && !dropout_masks->empty()) {
        if (dropout_masks->size() != n_layers - 1) {
          throw DimensionMismatch("dropout mask count does not match hidden layers");
        }
        lc.dropout = (*dropout_masks)[k];
        if (lc.dropout.rows() != batch || lc.dropout.cols() != out) {
          throw DimensionMismatch("dropout mask shape mismatch at layer " +
                                  std::to_string(k));
        }
        a = a.cwiseProduct(lc.dropout);
      }
      x = std::move(a);
    }
  }
  return loss;
}

Gradients backward_train(const ShadowModel& shadow, const ForwardCache& cache,
                         const FlipMask& mask) {
  if (cache.layers.size() != shadow.layers.size()) {
    throw InvalidCache("forward cache layer count does not match model");
  }
  if (cache.step_at_forward != shadow.step) {
    throw InvalidCache("forward cache is stale: model stepped since forward_train");
  }
  if (cache.mask_fingerprint != mask_fingerprint(mask)) {
    throw InvalidCache("flip mask differs from the one used in forward_train");
  }
  check_mask_compatible(shadow, mask);

  const auto n_layers = shadow.layers.size();
  const auto batch = cache.layers.front().x_in.rows();
  const double inv_batch = 1.0 / static_cast<double>(batch);

  Gradients grads;
  grads.layers.resize(n_layers);

  Eigen::MatrixXd d_out;  // gradient w.r.t. this layer's output x

  for (std::size_t kk = n_layers; kk-- > 0;) {
    const ShadowLayer& layer = shadow.layers[kk];
    const LayerCache& lc = cache.layers[kk];
    Gradients::Layer& gl = grads.layers[kk];
    Eigen::MatrixXd dz;  // gradient w.r.t. the signed-dot preactivation

    if (layer.is_output) {
      // Softmax cross-entropy: dlogits = (p - onehot)/B.
      Eigen::MatrixXd dlogits = lc.probs * inv_batch;
      for (Eigen::Index b = 0; b < batch; ++b) {
        dlogits(b, cache.labels[static_cast<std::size_t>(b)]) -= inv_batch;
      }
      dz = cache.logit_scale * dlogits;
      gl.bias = dz.colwise().sum().transpose();
    } else {
      // Through dropout, the activation gate, then batch norm.
      Eigen::MatrixXd da = d_out;
      if (lc.dropout.size() > 0) da = da.cwiseProduct(lc.dropout);
      Eigen::MatrixXd dy =
          da.cwiseProduct((lc.y.array().abs() <= 1.0).cast<double>().matrix());

      gl.gamma = dy.cwiseProduct(lc.xhat).colwise().sum().transpose();
      gl.beta = dy.colwise().sum().transpose();

      Eigen::MatrixXd dxhat =
          (dy.array().rowwise() * layer.gamma.transpose().array()).matrix();
      Eigen::VectorXd sum_dxhat = dxhat.colwise().sum().transpose();
      Eigen::VectorXd sum_dxhat_xhat =
          dxhat.cwiseProduct(lc.xhat).colwise().sum().transpose();
      // d/dz of batch norm with batch statistics.
      dz = dxhat * static_cast<double>(batch);
      dz.rowwise() -= sum_dxhat.transpose();
      dz -= (lc.xhat.array().rowwise() * sum_dxhat_xhat.transpose().array())
                .matrix();
      dz = (dz.array().rowwise() *
            (lc.inv_std.transpose().array() * inv_batch))
               .matrix();
    }

    // Weight gradient through the effective (flipped) weights; the
    // straight-through gate kills entries whose shadow weight left
    // [-1, 1].
    Eigen::MatrixXd dw_eff = dz.transpose() * lc.x_in;
    if (lc.flip_sign.size() > 0) dw_eff = dw_eff.cwiseProduct(lc.flip_sign);
    gl.w = dw_eff.cwiseProduct(
        (layer.w_real.array().abs() <= 1.0).cast<double>().matrix());

    if (kk > 0) d_out = dz * lc.w_eff;
  }
  return grads;
}

void optimizer_step(ShadowModel& shadow, const Gradients& grads,
                    const TrainConfig& config, double step_size) {
  if (grads.layers.size() != shadow.layers.size()) {
    throw DimensionMismatch("gradient layer count does not match model");
  }
  if (!grads.all_finite()) {
    throw NumericalDivergence("non-finite gradient in optimizer step");
  }
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double eps = config.adam_epsilon;
  const double t = static_cast<double>(shadow.step + 1);
  const double alpha =
      step_size * std::sqrt(1.0 - std::pow(b2, t)) / (1.0 - std::pow(b1, t));

  auto adam = [&](Eigen::MatrixXd& w, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                  const Eigen::MatrixXd& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    w -= alpha * (m.array() / (v.array().sqrt() + eps)).matrix();
  };
  auto adam_vec = [&](Eigen::VectorXd& w, Eigen::VectorXd& m, Eigen::VectorXd& v,
                      const Eigen::VectorXd& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    w -= alpha * (m.array() / (v.array().sqrt() + eps)).matrix();
  };

  for (std::size_t k = 0; k < shadow.layers.size(); ++k) {
    ShadowLayer& layer = shadow.layers[k];
    const Gradients::Layer& gl = grads.layers[k];
    adam(layer.w_real, layer.m_w, layer.v_w, gl.w);
    layer.w_real = layer.w_real.cwiseMax(-1.0).cwiseMin(1.0);
    if (layer.is_output) {
      adam_vec(layer.bias, layer.m_bias, layer.v_bias, gl.bias);
    } else {
      adam_vec(layer.gamma, layer.m_gamma, layer.v_gamma, gl.gamma);
      adam_vec(layer.beta, layer.m_beta, layer.v_beta, gl.beta);
    }
    if (!layer.w_real.allFinite()) {
      throw NumericalDivergence("non-finite weight after optimizer step");
    }
  }
  shadow.step += 1;
}

std::vector<Eigen::MatrixXd> make_dropout_masks(const ShadowModel& shadow,
                                                std::size_t batch, double rate,
                                                std::uint64_t seed,
                                                std::string_view stream_label) {
  std::vector<Eigen::MatrixXd> masks;
  if (rate <= 0.0) return masks;
  const double keep = 1.0 - rate;
  rng::Stream stream(seed, stream_label);
  for (std::size_t k = 0; k + 1 < shadow.layers.size(); ++k) {
    const auto out = static_cast<Eigen::Index>(shadow.layers[k].out_features());
    Eigen::MatrixXd m(static_cast<Eigen::Index>(batch), out);
    for (Eigen::Index b = 0; b < m.rows(); ++b) {
      for (Eigen::Index j = 0; j < out; ++j) {
        m(b, j) = stream.next_unit() < keep ? 1.0 / keep : 0.0;
      }
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

BnnModel export_model(const ShadowModel& shadow) {
  if (shadow.layers.empty()) throw InvalidConfig("shadow model has no layers");
  BnnModel model;
  model.input_binarization_threshold = shadow.input_threshold;
  model.n_classes = shadow.n_classes;
  model.output_mode = OutputMode::kBinaryHiddenIntegerLogits;

  for (const ShadowLayer& layer : shadow.layers) {
    const std::size_t in = layer.in_features();
    const std::size_t out = layer.out_features();
    DenseLayer dense;
    dense.weights = BitMatrix(out, in);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t c = 0; c < in; ++c) {
        const double w = layer.w_real(static_cast<Eigen::Index>(r),
                                      static_cast<Eigen::Index>(c));
        if (!std::isfinite(w)) throw InvalidWeight("non-finite shadow weight");
        dense.weights.set(r, c, w >= 0.0);
      }
    }

    if (layer.is_output) {
      // Logits were s*(dot + bias) with s > 0, so argmax is preserved
      // by scoring sign*(dot - dot_threshold) with threshold -bias,
      // i.e. popcount threshold (n - bias)/2.
      dense.thresholds.resize(out);
      dense.threshold_sign.assign(out, 1);
      for (std::size_t j = 0; j < out; ++j) {
        dense.thresholds[j] =
            (static_cast<double>(in) - layer.bias(static_cast<Eigen::Index>(j))) /
            2.0;
      }
    } else {
      // Training normalized the signed dot d; inference thresholds the
      // popcount s with d = 2s - n. Convert the running stats to the
      // popcount domain (exact): mean_s = (mean_d + n)/2, var_s =
      // var_d/4, eps_s = eps/4.
      BatchNormStats stats;
      stats.gamma.assign(layer.gamma.data(), layer.gamma.data() + out);
      stats.beta.assign(layer.beta.data(), layer.beta.data() + out);
      stats.running_mean.resize(out);
      stats.running_var.resize(out);
      for (std::size_t j = 0; j < out; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        stats.running_mean[j] =
            (layer.running_mean(jj) + static_cast<double>(in)) / 2.0;
        stats.running_var[j] = layer.running_var(jj) / 4.0;
      }
      stats.epsilon = shadow.bn_epsilon / 4.0;
      FoldedThresholds folded = fold_batchnorm_to_threshold(stats, in);
      dense.thresholds = std::move(folded.thresholds);
      dense.threshold_sign = std::move(folded.signs);
    }
    model.layers.push_back(std::move(dense));
  }
  model.validate();
  return model;
}

void refresh_bn_stats(ShadowModel& shadow, const Dataset& data,
                      double input_threshold, double p_train,
                      std::uint64_t seed) {
  if (shadow.layers.empty()) throw InvalidConfig("shadow model has no layers");
  if (data.n == 0) throw InvalidConfig("refresh_bn_stats: empty dataset");
  if (data.image_size != shadow.layers.front().in_features()) {
    throw DimensionMismatch("dataset image size " +
                            std::to_string(data.image_size) +
                            " does not match first layer fan-in " +
                            std::to_string(shadow.layers.front().in_features()));
  }
  if (!(p_train >= 0.0) || p_train > 1.0) {
    throw InvalidRate("refresh_bn_stats: p_train outside [0, 1]");
  }

  const std::size_t n = data.n;
  constexpr std::size_t kChunk = 4096;

  // Current layer input as +-1 bytes; starts as the binarized images.
  std::vector<signed char> cur(n * data.image_size);
  for (std::size_t i = 0; i < cur.size(); ++i) {
    cur[i] = data.images[i] >= input_threshold ? 1 : -1;
  }
  std::size_t cur_width = data.image_size;

  const auto load_chunk = [&](std::size_t start, std::size_t bsz,
                              Eigen::MatrixXd& x) {
    x.resize(static_cast<Eigen::Index>(bsz), static_cast<Eigen::Index>(cur_width));
    for (std::size_t b = 0; b < bsz; ++b) {
      const signed char* src = cur.data() + (start + b) * cur_width;
      for (std::size_t c = 0; c < cur_width; ++c) {
        x(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) = src[c];
      }
    }
  };

  Eigen::MatrixXd x;
  for (std::size_t k = 0; k + 1 < shadow.layers.size(); ++k) {
    ShadowLayer& layer = shadow.layers[k];
    const Eigen::MatrixXd w = layer.w_real.unaryExpr(&sign_pm1);
    const std::size_t out = layer.out_features();

    // One flip mask per chunk, shared by both passes, so an adapted
    // model's statistics are measured under its own error rate.
    const auto effective_w = [&](std::size_t start) -> Eigen::MatrixXd {
      if (p_train <= 0.0) return w;
      FaultSpec spec;
      spec.p = p_train;
      spec.seed = seed;
      const LayerShape shape{out, layer.in_features()};
      const FlipMask mask =
          sample_mask(spec, std::span<const LayerShape>(&shape, 1),
                      "bn-refresh/layer-" + std::to_string(k) + "/chunk-" +
                          std::to_string(start / kChunk));
      return w.cwiseProduct(flip_sign_matrix(mask.layers[0]));
    };

    // Pass 1: population mean/variance of the signed pre-activations
    // (biased variance, matching the per-batch convention).
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out));
    Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out));
    for (std::size_t start = 0; start < n; start += kChunk) {
      const std::size_t bsz = std::min(kChunk, n - start);
      load_chunk(start, bsz, x);
      const Eigen::MatrixXd z = x * effective_w(start).transpose();
      sum += z.colwise().sum().transpose();
      sumsq += z.array().square().colwise().sum().transpose().matrix();
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    layer.running_mean = sum * inv_n;
    layer.running_var = (sumsq * inv_n -
                         layer.running_mean.cwiseProduct(layer.running_mean))
                            .cwiseMax(0.0);

    // Pass 2: binarized activations under the fresh statistics feed the
    // next layer.
    const Eigen::VectorXd inv_std =
        (layer.running_var.array() + shadow.bn_epsilon).rsqrt().matrix();
    std::vector<signed char> next(n * out);
    for (std::size_t start = 0; start < n; start += kChunk) {
      const std::size_t bsz = std::min(kChunk, n - start);
      load_chunk(start, bsz, x);
      const Eigen::MatrixXd z = x * effective_w(start).transpose();
      const Eigen::MatrixXd y =
          (((z.rowwise() - layer.running_mean.transpose()).array().rowwise() *
            inv_std.transpose().array())
               .rowwise() *
           layer.gamma.transpose().array())
              .rowwise() +
          layer.beta.transpose().array();
      for (std::size_t b = 0; b < bsz; ++b) {
        signed char* dst = next.data() + (start + b) * out;
        for (std::size_t c = 0; c < out; ++c) {
          dst[c] = y(static_cast<Eigen::Index>(b),
                     static_cast<Eigen::Index>(c)) >= 0.0
                       ? 1
                       : -1;
        }
      }
    }
    cur = std::move(next);
    cur_width = out;
  }
}

TrainResult train(const Dataset& data, const TrainConfig& config) {
  config.validate();
  if (data.n == 0) throw InvalidConfig("training dataset is empty");
  for (std::size_t i = 0; i < data.n; ++i) {
    if (data.labels[i] >= config.n_classes) {
      throw InvalidLabel("label " + std::to_string(int(data.labels[i])) +
                         " exceeds n_classes-1");
    }
  }

  ShadowModel shadow = init_shadow(config, data.image_size);
  const auto shapes = shadow.shapes();

  // Binarize the inputs once; batches are gathered from this cache.
  std::vector<signed char> bits(data.n * data.image_size);
  for (std::size_t i = 0; i < data.n * data.image_size; ++i) {
    bits[i] = data.images[i] >= config.input_threshold ? 1 : -1;
  }

  std::vector<std::size_t> order(data.n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  ForwardCache cache;
  std::size_t iteration = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr_now =
        config.learning_rate * std::pow(config.lr_decay, static_cast<double>(epoch));
    {
      rng::Stream shuffle_stream(config.seed, "shuffle-epoch-" + std::to_string(epoch));
      for (std::size_t i = data.n - 1; i > 0; --i) {
        std::swap(order[i], order[shuffle_stream.next_below(i + 1)]);
      }
    }

    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < data.n; start += config.batch_size) {
      const std::size_t bsz = std::min(config.batch_size, data.n - start);
      Eigen::MatrixXd x(static_cast<Eigen::Index>(bsz),
                        static_cast<Eigen::Index>(data.image_size));
      std::vector<int> labels(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const std::size_t idx = order[start + b];
        const signed char* src = bits.data() + idx * data.image_size;
        for (std::size_t c = 0; c < data.image_size; ++c) {
          x(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) = src[c];
        }
        labels[b] = data.labels[idx];
      }

      FlipMask mask;
      if (config.p_train > 0.0) {
        FaultSpec spec;
        spec.p = config.p_train;
        spec.seed = config.seed;
        mask = sample_mask(spec, shapes, "train-iter-" + std::to_string(iteration));
      }
      auto dropout = make_dropout_masks(shadow, bsz, config.dropout_rate,
                                        config.seed,
                                        "dropout-iter-" + std::to_string(iteration));

      const double loss = forward_train(shadow, x, labels, mask,
                                        BinarizeMode::kBinary,
                                        dropout.empty() ? nullptr : &dropout, cache);
      if (!std::isfinite(loss)) {
        throw NumericalDivergence("non-finite training loss at iteration " +
                                  std::to_string(iteration));
      }
      Gradients grads = backward_train(shadow, cache, mask);
      optimizer_step(shadow, grads, config, lr_now);

      // Running-stat update for export, from this batch's statistics.
      for (std::size_t k = 0; k + 1 < shadow.layers.size(); ++k) {
        ShadowLayer& layer = shadow.layers[k];
        const LayerCache& lc = cache.layers[k];
        layer.running_mean = config.bn_momentum * layer.running_mean +
                             (1.0 - config.bn_momentum) * lc.batch_mean;
        layer.running_var = config.bn_momentum * layer.running_var +
                            (1.0 - config.bn_momentum) * lc.batch_var;
      }

      loss_sum += loss;
      n_batches += 1;
      iteration += 1;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(n_batches));
    if (config.verbose) {
      std::fprintf(stderr, "epoch %zu/%zu  loss %.6f  lr %.3g\n", epoch + 1,
                   config.epochs, result.epoch_losses.back(), lr_now);
    }
  }

  // Fold thresholds from deployment-mode statistics; the momentum
  // average tracks dropout-scaled batches and a short window.
  refresh_bn_stats(shadow, data, config.input_threshold, config.p_train,
                   config.seed);

  result.model = export_model(shadow);
  result.shadow = std::move(shadow);
  return result;
}

void save_checkpoint(const ShadowModel& shadow, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  os.write("BNNCKPT1", 8);
  write_u32(os, static_cast<std::uint32_t>(shadow.layers.size()));
  write_u32(os, shadow.n_classes);
  write_u64(os, static_cast<std::uint64_t>(shadow.step));
  write_f64(os, shadow.input_threshold);
  write_f64(os, shadow.bn_epsilon);
  for (const ShadowLayer& layer : shadow.layers) {
    write_u32(os, layer.is_output ? 1u : 0u);
    write_mat(os, layer.w_real);
    write_mat(os, layer.m_w);
    write_mat(os, layer.v_w);
    if (layer.is_output) {
      write_vec(os, layer.bias);
      write_vec(os, layer.m_bias);
      write_vec(os, layer.v_bias);
    } else {
      write_vec(os, layer.gamma);
      write_vec(os, layer.beta);
      write_vec(os, layer.running_mean);
      write_vec(os, layer.running_var);
      write_vec(os, layer.m_gamma);
      write_vec(os, layer.v_gamma);
      write_vec(os, layer.m_beta);
      write_vec(os, layer.v_beta);
    }
  }
  if (!os) throw FormatError("checkpoint write failed: " + path);
}

ShadowModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  CheckpointReader r(is);
  r.expect_magic("BNNCKPT1", 8);

  ShadowModel shadow;
  const auto n_layers = r.u32();
  shadow.n_classes = r.u32();
  shadow.step = static_cast<std::int64_t>(r.u64());
  shadow.input_threshold = r.f64();
  shadow.bn_epsilon = r.f64();
  if (n_layers == 0) throw ModelFormatError("checkpoint has zero layers", r.offset());

  for (std::uint32_t k = 0; k < n_layers; ++k) {
    ShadowLayer layer;
    layer.is_output = (r.u32() != 0);
    layer.w_real = r.mat();
    layer.m_w = r.mat();
    layer.v_w = r.mat();
    if (layer.is_output) {
      layer.bias = r.vec();
      layer.m_bias = r.vec();
      layer.v_bias = r.vec();
    } else {
      layer.gamma = r.vec();
      layer.beta = r.vec();
      layer.running_mean = r.vec();
      layer.running_var = r.vec();
      layer.m_gamma = r.vec();
      layer.v_gamma = r.vec();
      layer.m_beta = r.vec();
      layer.v_beta = r.vec();
    }
    shadow.layers.push_back(std::move(layer));
  }
  is.peek();
  if (!is.eof()) throw ModelFormatError("trailing bytes after checkpoint", r.offset());
  return shadow;
}

}  // namespace bnn
