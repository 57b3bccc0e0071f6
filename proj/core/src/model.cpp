#include "bnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace bnn {

void DenseLayer::validate() const {
  if (thresholds.size() != weights.rows() ||
      threshold_sign.size() != weights.rows())
    throw DimensionMismatch(
        "DenseLayer: thresholds/signs length " +
        std::to_string(thresholds.size()) + "/" +
        std::to_string(threshold_sign.size()) + " != rows " +
        std::to_string(weights.rows()));
  for (double t : thresholds)
    if (!std::isfinite(t))
      throw InvalidWeight("DenseLayer: non-finite threshold");
  for (std::int8_t s : threshold_sign)
    if (s != 1 && s != -1)
      throw InvalidSignValue("DenseLayer: threshold_sign must be +1/-1");
}

void BnnModel::validate() const {
  if (layers.empty()) throw DimensionMismatch("BnnModel: no layers");
  for (const auto& l : layers) l.validate();
  for (std::size_t k = 0; k + 1 < layers.size(); ++k)
    if (layers[k].out_features() != layers[k + 1].in_features())
      throw DimensionMismatch(
          "BnnModel: layer " + std::to_string(k) + " out " +
          std::to_string(layers[k].out_features()) + " != layer " +
          std::to_string(k + 1) + " in " +
          std::to_string(layers[k + 1].in_features()));
  if (layers.back().out_features() != n_classes)
    throw DimensionMismatch("BnnModel: last layer out " +
                            std::to_string(layers.back().out_features()) +
                            " != n_classes " + std::to_string(n_classes));
}

int binarize_real(double w) {
  if (!std::isfinite(w))
    throw InvalidWeight("binarize_real: non-finite weight");
  return w >= 0.0 ? +1 : -1;
}

BitVector binarize_input(std::span<const float> pixels, double threshold) {
  BitVector out(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float p = pixels[i];
    if (!(p >= 0.0f && p <= 1.0f))
      throw InvalidPixel("binarize_input: pixel " + std::to_string(i) +
                         " = " + std::to_string(p) + " outside [0,1]");
    if (p >= threshold) out.set(i, true);
  }
  return out;
}

BitVector layer_forward(const DenseLayer& layer, const BitVector& x) {
  if (layer.in_features() != x.size())
    throw DimensionMismatch("layer_forward: in_features " +
                            std::to_string(layer.in_features()) +
                            " vs input size " + std::to_string(x.size()));
  const auto popcounts = binary_matvec(layer.weights, x);
  BitVector out(layer.out_features());
  for (std::size_t j = 0; j < popcounts.size(); ++j) {
    const double lhs = layer.threshold_sign[j] *
                       (static_cast<double>(popcounts[j]) - layer.thresholds[j]);
    if (lhs > 0.0) out.set(j, true);
  }
  return out;
}

FoldedThresholds fold_batchnorm_to_threshold(const BatchNormStats& stats,
                                             std::size_t fan_in) {
  const std::size_t n = stats.gamma.size();
  if (stats.beta.size() != n || stats.running_mean.size() != n ||
      stats.running_var.size() != n)
    throw DimensionMismatch("fold_batchnorm_to_threshold: ragged stats");
  if (stats.epsilon <= 0.0)
    throw InvalidDistribution("fold_batchnorm_to_threshold: epsilon <= 0");

  FoldedThresholds out;
  out.thresholds.resize(n);
  out.signs.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (stats.running_var[j] < 0.0)
      throw InvalidDistribution("fold_batchnorm_to_threshold: negative var");
    const double g = stats.gamma[j];
    if (g == 0.0) {
      // Constant neuron: pin to -1 by putting the threshold above any
      // reachable popcount.
      out.degenerate.push_back(j);
      out.signs[j] = +1;
      out.thresholds[j] = static_cast<double>(fan_in) + 1.0;
      continue;
    }
    const double sd = std::sqrt(stats.running_var[j] + stats.epsilon);
    out.thresholds[j] = stats.running_mean[j] - stats.beta[j] * sd / g;
    out.signs[j] = g > 0.0 ? +1 : -1;
  }
  return out;
}

std::vector<double> model_scores(const BnnModel& model, const BitVector& input) {
  BitVector act = input;
  for (std::size_t k = 0; k + 1 < model.layers.size(); ++k)
    act = layer_forward(model.layers[k], act);

  const DenseLayer& last = model.layers.back();
  if (last.in_features() != act.size())
    throw DimensionMismatch("model_scores: last layer in_features " +
                            std::to_string(last.in_features()) +
                            " vs activation size " + std::to_string(act.size()));
  const auto popcounts = binary_matvec(last.weights, act);
  const auto n = static_cast<double>(last.in_features());
  std::vector<double> scores(popcounts.size());
  for (std::size_t j = 0; j < popcounts.size(); ++j) {
    const double signed_dot = 2.0 * static_cast<double>(popcounts[j]) - n;
    const double dot_threshold = 2.0 * last.thresholds[j] - n;
    scores[j] = last.threshold_sign[j] * (signed_dot - dot_threshold);
  }
  return scores;
}

int model_forward(const BnnModel& model, std::span<const float> image) {
  if (model.layers.empty()) throw DimensionMismatch("model_forward: no layers");
  if (image.size() != model.input_size())
    throw DimensionMismatch("model_forward: image size " +
                            std::to_string(image.size()) + " vs input size " +
                            std::to_string(model.input_size()));
  const BitVector input =
      binarize_input(image, model.input_binarization_threshold);
  const auto scores = model_scores(model, input);
  std::size_t best = 0;
  for (std::size_t j = 1; j < scores.size(); ++j)
    if (scores[j] > scores[best]) best = j;
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Serialization. Layout (all little-endian):
//   char[8]  magic "BNNMODEL"
//   u32      version (1)
//   u32      n_layers
//   u32      n_classes
//   u32      output_mode
//   f64      input_binarization_threshold
//   per layer:
//     u32 rows, u32 cols
//     rows * ceil(cols/64) u64 packed weight words (row-major)
//     rows f64 thresholds
//     rows i8  threshold signs (+1 / -1)
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'B', 'N', 'N', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t kVersion = 1;

class Reader {
public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw ModelFormatError("cannot open model file " + path, 0);
  }

  template <typename T>
  T read(const char* what) {
    T v;
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_)
      throw ModelFormatError(std::string("truncated model file reading ") +
                                 what,
                             offset_);
    offset_ += sizeof(T);
    return v;
  }

  void read_bytes(void* dst, std::size_t n, const char* what) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_)
      throw ModelFormatError(std::string("truncated model file reading ") +
                                 what,
                             offset_);
    offset_ += n;
  }

  std::uint64_t offset() const noexcept { return offset_; }

  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

private:
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

void save_model(const BnnModel& model, const std::string& path) {
  model.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("save_model: cannot open " + path + " for writing");

  auto put = [&out](const void* p, std::size_t n) {
    out.write(reinterpret_cast<const char*>(p),
              static_cast<std::streamsize>(n));
  };
  put(kMagic, sizeof(kMagic));
  const std::uint32_t version = kVersion;
  const auto n_layers = static_cast<std::uint32_t>(model.layers.size());
  const auto mode = static_cast<std::uint32_t>(model.output_mode);
  put(&version, 4);
  put(&n_layers, 4);
  put(&model.n_classes, 4);
  put(&mode, 4);
  put(&model.input_binarization_threshold, 8);
  for (const auto& layer : model.layers) {
    const auto rows = static_cast<std::uint32_t>(layer.weights.rows());
    const auto cols = static_cast<std::uint32_t>(layer.weights.cols());
    put(&rows, 4);
    put(&cols, 4);
    const auto words = layer.weights.words();
    put(words.data(), words.size() * 8);
    put(layer.thresholds.data(), layer.thresholds.size() * 8);
    put(layer.threshold_sign.data(), layer.threshold_sign.size());
  }
  out.flush();
  if (!out) throw Error("save_model: write to " + path + " failed");
}

BnnModel load_model(const std::string& path) {
  Reader r(path);

  char magic[8];
  r.read_bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ModelFormatError("bad magic in " + path, 0);
  const auto version = r.read<std::uint32_t>("version");
  if (version != kVersion)
    throw ModelFormatError("unsupported model version " +
                               std::to_string(version),
                           r.offset() - 4);
  const auto n_layers = r.read<std::uint32_t>("layer count");
  if (n_layers == 0)
    throw ModelFormatError("model declares zero layers", r.offset() - 4);

  BnnModel model;
  model.n_classes = r.read<std::uint32_t>("class count");
  model.output_mode =
      static_cast<OutputMode>(r.read<std::uint32_t>("output mode"));
  model.input_binarization_threshold = r.read<double>("input threshold");

  for (std::uint32_t k = 0; k < n_layers; ++k) {
    const auto rows = r.read<std::uint32_t>("layer rows");
    const auto cols = r.read<std::uint32_t>("layer cols");
    if (rows == 0 || cols == 0)
      throw ModelFormatError("layer " + std::to_string(k) +
                                 " has zero dimension",
                             r.offset() - 4);
    DenseLayer layer;
    layer.weights = BitMatrix(rows, cols);
    const auto words = layer.weights.mutable_words();
    r.read_bytes(words.data(), words.size() * 8, "weight words");
    if (!layer.weights.padding_clear())
      throw ModelFormatError("layer " + std::to_string(k) +
                                 " has nonzero padding bits",
                             r.offset());
    layer.thresholds.resize(rows);
    r.read_bytes(layer.thresholds.data(), rows * 8, "thresholds");
    layer.threshold_sign.resize(rows);
    r.read_bytes(layer.threshold_sign.data(), rows, "threshold signs");
    model.layers.push_back(std::move(layer));
  }
  if (!r.at_eof())
    throw ModelFormatError("trailing bytes after model payload", r.offset());

  try {
    model.validate();
  } catch (const Error& e) {
    throw ModelFormatError(std::string("inconsistent model: ") + e.what(),
                           r.offset());
  }
  return model;
}

}  // namespace bnn
