// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace speechface {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class InvalidConfiguration : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation is called in the wrong lifecycle state,
/// e.g. backward() on an empty tape.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text input. Carries the byte offset (or line
/// number for text formats) where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Checkpoint / rig / dataset load failure naming the offending field.
class LoadError : public Error {
 public:
  LoadError(const std::string& field, const std::string& detail)
      : Error("load error in field '" + field + "': " + detail), field_(field) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace speechface
