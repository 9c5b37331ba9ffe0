#pragma once

#include <stdexcept>
#include <string>

namespace covsev {

// Argument errors use std::invalid_argument / std::out_of_range directly.

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t row)
      : std::runtime_error(what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A tensor or array arrived with the wrong shape.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pluggable stage (filter, segmenter) violated its output contract.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace covsev
