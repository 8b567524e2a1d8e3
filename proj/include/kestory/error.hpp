#pragma once

#include <stdexcept>
#include <string>

namespace kestory {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or inconsistent inputs (bad sizes, stage/dataset mismatch, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input file content. `line` is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::size_t position)
      : Error("position " + std::to_string(position) + ": " + what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced or consumed by a numeric routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Fake-story construction impossible for the given story/pool.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace kestory
