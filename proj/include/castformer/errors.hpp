#pragma once

#include <stdexcept>
#include <string>

namespace castformer {

// Root of every error raised by the library. The CLI maps subclasses onto
// process exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MaskError : public Error {
 public:
  using Error::Error;
};

// Parameter/gradient name sets disagree.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// A function handed to the finite-difference checker is not deterministic.
class UnreliableCheckError : public Error {
 public:
  using Error::Error;
};

class SequenceTooShortError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

// A verification command found a violation (gradient check above tolerance).
class VerificationError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t batch)
      : Error(what), batch_(batch) {}
  std::size_t batch() const { return batch_; }

 private:
  std::size_t batch_;
};

}  // namespace castformer
