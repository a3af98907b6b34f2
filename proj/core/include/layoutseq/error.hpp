#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace layoutseq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value or index outside its legal range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or hyperparameter.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Token id outside the vocabulary or in the wrong token range.
class VocabError : public Error {
 public:
  using Error::Error;
};

/// Sequence longer than the model or layout limits allow.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Malformed token sequence; carries the offending position.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t index)
      : Error(what + " (at index " + std::to_string(index) + ")"), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Bad input data: schema violations, unreadable files, corrupt checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A grammar rule could not place a box (every choice blocked or off-grid).
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// JSON input that does not match its schema; carries the JSON path.
class SchemaError : public DataError {
 public:
  SchemaError(const std::string& path, const std::string& what)
      : DataError(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Training aborted (non-finite loss and similar).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace layoutseq
