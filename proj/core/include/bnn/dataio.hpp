#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bnn/errors.hpp"

namespace bnn {

// In-memory digit dataset: images as rows of pixel reals in [0, 1].
struct Dataset {
  std::size_t n = 0;
  std::size_t image_size = 0;          // pixels per image (28*28 for MNIST)
  std::vector<float> images;           // n * image_size, row-major
  std::vector<std::uint8_t> labels;    // n values in [0, 9]
  std::string split;                   // "train" / "test" / caller tag

  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * image_size, image_size};
  }
};

// Big-endian IDX containers, exactly per the canonical MNIST layout.
// Returns row-major pixels scaled to [0,1] by /255.
struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> pixels;  // count * rows * cols
};

IdxImages load_idx_images(const std::string& path);
std::vector<std::uint8_t> load_idx_labels(const std::string& path);

// Pair image and label files into a validated dataset.
Dataset load_dataset(const std::string& images_path,
                     const std::string& labels_path, const std::string& split);

// Conventional train/test file names under a directory.
Dataset load_mnist_split(const std::string& dir, const std::string& split);

// Deterministic shuffled prefix of size n; the identity when n equals
// the dataset size.
Dataset subset(const Dataset& dataset, std::size_t n, std::uint64_t seed);

// Human instructions for obtaining the files; the library never
// touches the network.
std::string mnist_fetch_instructions(const std::string& dir);

}  // namespace bnn
