#include "bnn/dataio.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "bnn/rng.hpp"

namespace bnn {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot open " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(size));
  if (size > 0) in.read(buf.data(), size);
  if (!in) throw FormatError("cannot read " + path);
  return buf;
}

std::uint32_t read_be32(const std::vector<char>& buf, std::size_t offset,
                        const std::string& path) {
  if (offset + 4 > buf.size())
    throw FormatError(path + ": truncated header, expected at least " +
                      std::to_string(offset + 4) + " bytes, got " +
                      std::to_string(buf.size()));
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + offset);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
         (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

}  // namespace

IdxImages load_idx_images(const std::string& path) {
  const auto buf = read_file(path);
  const std::uint32_t magic = read_be32(buf, 0, path);
  if (magic != kImagesMagic)
    throw FormatError(path + ": bad magic " + hex32(magic) +
                      ", expected 0x00000803");
  IdxImages out;
  out.count = read_be32(buf, 4, path);
  out.rows = read_be32(buf, 8, path);
  out.cols = read_be32(buf, 12, path);
  const std::size_t expected = 16 + out.count * out.rows * out.cols;
  if (buf.size() != expected)
    throw FormatError(path + ": payload size mismatch, expected " +
                      std::to_string(expected) + " bytes, got " +
                      std::to_string(buf.size()));
  out.pixels.resize(out.count * out.rows * out.cols);
  const auto* src = reinterpret_cast<const unsigned char*>(buf.data() + 16);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = static_cast<float>(src[i]) / 255.0f;
  return out;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
  const auto buf = read_file(path);
  const std::uint32_t magic = read_be32(buf, 0, path);
  if (magic != kLabelsMagic)
    throw FormatError(path + ": bad magic " + hex32(magic) +
                      ", expected 0x00000801");
  const std::uint32_t count = read_be32(buf, 4, path);
  const std::size_t expected = 8 + count;
  if (buf.size() != expected)
    throw FormatError(path + ": payload size mismatch, expected " +
                      std::to_string(expected) + " bytes, got " +
                      std::to_string(buf.size()));
  std::vector<std::uint8_t> labels(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto v = static_cast<std::uint8_t>(buf[8 + i]);
    if (v > 9)
      throw InvalidLabel(path + ": label " + std::to_string(int(v)) +
                         " at index " + std::to_string(i) + " outside [0,9]");
    labels[i] = v;
  }
  return labels;
}

Dataset load_dataset(const std::string& images_path,
                     const std::string& labels_path,
                     const std::string& split) {
  IdxImages imgs = load_idx_images(images_path);
  std::vector<std::uint8_t> labels = load_idx_labels(labels_path);
  if (imgs.count != labels.size())
    throw ConsistencyError("image count " + std::to_string(imgs.count) +
                           " != label count " + std::to_string(labels.size()) +
                           " (" + images_path + " / " + labels_path + ")");
  Dataset ds;
  ds.n = imgs.count;
  ds.image_size = imgs.rows * imgs.cols;
  ds.images = std::move(imgs.pixels);
  ds.labels = std::move(labels);
  ds.split = split;
  return ds;
}

Dataset load_mnist_split(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  const std::string prefix = split == "train" ? "train" : "t10k";
  const fs::path images = fs::path(dir) / (prefix + "-images-idx3-ubyte");
  const fs::path labels = fs::path(dir) / (prefix + "-labels-idx1-ubyte");
  if (!fs::exists(images) || !fs::exists(labels))
    throw FormatError("MNIST files missing under " + dir + "\n" +
                      mnist_fetch_instructions(dir));
  return load_dataset(images.string(), labels.string(), split);
}

Dataset subset(const Dataset& dataset, std::size_t n, std::uint64_t seed) {
  if (n > dataset.n)
    throw InvalidSubset("subset: n = " + std::to_string(n) +
                        " exceeds dataset size " + std::to_string(dataset.n));
  if (n == dataset.n) return dataset;

  std::vector<std::size_t> order(dataset.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng::Stream rs(seed, "subset");
  // Fisher-Yates; only the first n slots are consumed.
  for (std::size_t i = dataset.n - 1; i > 0; --i) {
    const std::size_t j = rs.next_below(i + 1);
    std::swap(order[i], order[j]);
  }

  Dataset out;
  out.n = n;
  out.image_size = dataset.image_size;
  out.split = dataset.split;
  out.images.resize(n * dataset.image_size);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = dataset.image(order[i]);
    std::copy(src.begin(), src.end(),
              out.images.begin() + i * dataset.image_size);
    out.labels[i] = dataset.labels[order[i]];
  }
  return out;
}

std::string mnist_fetch_instructions(const std::string& dir) {
  return "Fetch the four canonical MNIST IDX files (train-images-idx3-ubyte,\n"
         "train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte),\n"
         "e.g. gunzip the archives from https://ossci-datasets.s3.amazonaws.com/mnist/\n"
         "and place them under " + dir + " (uncompressed).";
}

}  // namespace bnn
