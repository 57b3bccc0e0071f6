#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bnn/errors.hpp"

namespace bnn {

// Packed {+1,-1} vectors and matrices. Encoding: bit 1 means +1,
// bit 0 means -1, so XNOR counts sign agreements directly. Padding
// bits past the logical length are kept zero at all times; every
// mutating entry point maintains that, which lets the kernels run
// popcounts over whole words without masking.

class BitVector {
public:
  static constexpr std::size_t kWordBits = 64;

  BitVector() = default;
  explicit BitVector(std::size_t n_bits)
      : n_bits_(n_bits), words_((n_bits + kWordBits - 1) / kWordBits, 0) {}

  std::size_t size() const noexcept { return n_bits_; }
  std::size_t word_count() const noexcept { return words_.size(); }
  std::span<const std::uint64_t> words() const noexcept { return words_; }

  // Raw word access for code that preserves the padding invariant itself.
  std::span<std::uint64_t> mutable_words() noexcept { return words_; }

  bool get(std::size_t i) const {
    check_index(i);
    return (words_[i / kWordBits] >> (i % kWordBits)) & 1u;
  }

  void set(std::size_t i, bool v) {
    check_index(i);
    const std::uint64_t bit = std::uint64_t{1} << (i % kWordBits);
    if (v)
      words_[i / kWordBits] |= bit;
    else
      words_[i / kWordBits] &= ~bit;
  }

  int sign(std::size_t i) const { return get(i) ? +1 : -1; }

  bool operator==(const BitVector&) const = default;

private:
  void check_index(std::size_t i) const {
    if (i >= n_bits_)
      throw DimensionMismatch("BitVector index " + std::to_string(i) +
                              " out of range (size " +
                              std::to_string(n_bits_) + ")");
  }

  std::size_t n_bits_ = 0;
  std::vector<std::uint64_t> words_;
};

class BitMatrix {
public:
  static constexpr std::size_t kWordBits = BitVector::kWordBits;

  BitMatrix() = default;
  BitMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows),
        cols_(cols),
        row_words_((cols + kWordBits - 1) / kWordBits),
        words_(rows * row_words_, 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t row_words() const noexcept { return row_words_; }

  std::span<const std::uint64_t> row(std::size_t r) const {
    check_row(r);
    return {words_.data() + r * row_words_, row_words_};
  }

  std::span<const std::uint64_t> words() const noexcept { return words_; }

  // Raw word access for kernels that preserve the padding invariant
  // themselves (e.g. XOR with another valid matrix).
  std::span<std::uint64_t> mutable_words() noexcept { return words_; }

  bool get(std::size_t r, std::size_t c) const {
    check_row(r);
    check_col(c);
    return (words_[r * row_words_ + c / kWordBits] >> (c % kWordBits)) & 1u;
  }

  void set(std::size_t r, std::size_t c, bool v) {
    check_row(r);
    check_col(c);
    const std::uint64_t bit = std::uint64_t{1} << (c % kWordBits);
    std::uint64_t& w = words_[r * row_words_ + c / kWordBits];
    if (v)
      w |= bit;
    else
      w &= ~bit;
  }

  int sign(std::size_t r, std::size_t c) const { return get(r, c) ? +1 : -1; }

  BitVector row_vector(std::size_t r) const;
  void set_row(std::size_t r, const BitVector& v);

  // True iff every padding bit is zero; cheap sanity hook for tests.
  bool padding_clear() const noexcept;

  bool operator==(const BitMatrix&) const = default;

private:
  void check_row(std::size_t r) const {
    if (r >= rows_)
      throw DimensionMismatch("BitMatrix row " + std::to_string(r) +
                              " out of range (rows " + std::to_string(rows_) +
                              ")");
  }
  void check_col(std::size_t c) const {
    if (c >= cols_)
      throw DimensionMismatch("BitMatrix col " + std::to_string(c) +
                              " out of range (cols " + std::to_string(cols_) +
                              ")");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t row_words_ = 0;
  std::vector<std::uint64_t> words_;
};

// Pack a +-1 sequence; anything outside {+1,-1} throws InvalidSignValue.
BitVector pack_signs(std::span<const std::int8_t> values);
std::vector<std::int8_t> unpack_signs(const BitVector& v);

// Number of positions where a and b agree (the POPCOUNT(XNOR) kernel).
std::int64_t xnor_popcount(const BitVector& a, const BitVector& b);

// +-1 dot product recovered from an agreement count: 2*popcount - n.
std::int64_t signed_dot_from_popcount(std::int64_t popcount,
                                      std::int64_t n_bits);

// Per-row xnor_popcount of w against x.
std::vector<std::int64_t> binary_matvec(const BitMatrix& w, const BitVector& x);

// Plain integer +-1 dot product; the independent oracle for the packed path.
std::int64_t reference_dot(std::span<const std::int8_t> a,
                           std::span<const std::int8_t> b);

}  // namespace bnn
