#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bnn {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
  using Error::Error;
};

class InvalidSignValue : public Error {
public:
  using Error::Error;
};

class InvalidPopcount : public Error {
public:
  using Error::Error;
};

class InvalidWeight : public Error {
public:
  using Error::Error;
};

class InvalidPixel : public Error {
public:
  using Error::Error;
};

// Model file parse/serialize failure; carries the byte offset where
// the reader gave up.
class ModelFormatError : public Error {
public:
  ModelFormatError(const std::string& msg, std::uint64_t byte_offset)
      : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::uint64_t byte_offset() const noexcept { return byte_offset_; }

private:
  std::uint64_t byte_offset_;
};

class InvalidRate : public Error {
public:
  using Error::Error;
};

class InvalidCache : public Error {
public:
  using Error::Error;
};

class NumericalDivergence : public Error {
public:
  using Error::Error;
};

class InvalidDistribution : public Error {
public:
  using Error::Error;
};

class FitFailure : public Error {
public:
  using Error::Error;
};

class InvalidFraction : public Error {
public:
  using Error::Error;
};

// IDX dataset file problems.
class FormatError : public Error {
public:
  using Error::Error;
};

class InvalidLabel : public FormatError {
public:
  using FormatError::FormatError;
};

class ConsistencyError : public Error {
public:
  using Error::Error;
};

class InvalidSubset : public Error {
public:
  using Error::Error;
};

class ExtrapolationRefused : public Error {
public:
  using Error::Error;
};

class InvalidConfig : public Error {
public:
  using Error::Error;
};

}  // namespace bnn
