#include "bnn/bitlinalg.hpp"

#include <bit>
#include <string>

namespace bnn {

BitVector BitMatrix::row_vector(std::size_t r) const {
  check_row(r);
  BitVector out(cols_);
  const auto src = row(r);
  const auto dst = out.mutable_words();
  for (std::size_t i = 0; i < row_words_; ++i) dst[i] = src[i];
  return out;
}

void BitMatrix::set_row(std::size_t r, const BitVector& v) {
  check_row(r);
  if (v.size() != cols_)
    throw DimensionMismatch("set_row: vector size " + std::to_string(v.size()) +
                            " != cols " + std::to_string(cols_));
  const auto src = v.words();
  for (std::size_t i = 0; i < row_words_; ++i)
    words_[r * row_words_ + i] = src[i];
}

bool BitMatrix::padding_clear() const noexcept {
  const std::size_t rem = cols_ % kWordBits;
  if (rem == 0 || rows_ == 0) return true;
  const std::uint64_t pad_mask = ~((std::uint64_t{1} << rem) - 1);
  for (std::size_t r = 0; r < rows_; ++r)
    if (words_[r * row_words_ + row_words_ - 1] & pad_mask) return false;
  return true;
}

BitVector pack_signs(std::span<const std::int8_t> values) {
  BitVector out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int v = values[i];
    if (v != 1 && v != -1)
      throw InvalidSignValue("pack_signs: element " + std::to_string(i) +
                             " is " + std::to_string(v) + ", expected +1/-1");
    if (v == 1) out.set(i, true);
  }
  return out;
}

std::vector<std::int8_t> unpack_signs(const BitVector& v) {
  std::vector<std::int8_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<std::int8_t>(v.sign(i));
  return out;
}

std::int64_t xnor_popcount(const BitVector& a, const BitVector& b) {
  if (a.size() != b.size())
    throw DimensionMismatch("xnor_popcount: sizes " + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()));
  const auto aw = a.words();
  const auto bw = b.words();
  // Count disagreements over whole words; zeroed padding never disagrees.
  std::int64_t diff = 0;
  for (std::size_t i = 0; i < aw.size(); ++i)
    diff += std::popcount(aw[i] ^ bw[i]);
  return static_cast<std::int64_t>(a.size()) - diff;
}

std::int64_t signed_dot_from_popcount(std::int64_t popcount,
                                      std::int64_t n_bits) {
  if (popcount < 0 || popcount > n_bits)
    throw InvalidPopcount("signed_dot_from_popcount: popcount " +
                          std::to_string(popcount) + " outside [0, " +
                          std::to_string(n_bits) + "]");
  return 2 * popcount - n_bits;
}

std::vector<std::int64_t> binary_matvec(const BitMatrix& w,
                                        const BitVector& x) {
  if (w.cols() != x.size())
    throw DimensionMismatch("binary_matvec: matrix cols " +
                            std::to_string(w.cols()) + " vs vector size " +
                            std::to_string(x.size()));
  const std::size_t nw = w.row_words();
  const std::uint64_t* xw = x.words().data();
  const std::uint64_t* mw = w.words().data();
  const auto n = static_cast<std::int64_t>(w.cols());

  std::vector<std::int64_t> out(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const std::uint64_t* rw = mw + r * nw;
    std::int64_t diff = 0;
    for (std::size_t i = 0; i < nw; ++i)
      diff += std::popcount(rw[i] ^ xw[i]);
    out[r] = n - diff;
  }
  return out;
}

std::int64_t reference_dot(std::span<const std::int8_t> a,
                           std::span<const std::int8_t> b) {
  if (a.size() != b.size())
    throw DimensionMismatch("reference_dot: sizes " + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()));
  std::int64_t acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<std::int64_t>(a[i]) * static_cast<std::int64_t>(b[i]);
  return acc;
}

}  // namespace bnn
