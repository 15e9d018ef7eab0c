#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace atlas {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch detected while evaluating a tape node.
class ShapeError : public Error {
 public:
  ShapeError(std::size_t node, const std::string& op, const std::string& what)
      : Error("node " + std::to_string(node) + " (" + op + "): " + what), node_(node), op_(op) {}

  std::size_t node() const { return node_; }
  const std::string& op() const { return op_; }

 private:
  std::size_t node_;
  std::string op_;
};

/// File could not be read, written, or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Parse failure with a 1-based line number.
class ParseError : public IoError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : IoError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Non-finite value encountered during optimization or evaluation.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t step = 0, std::string last_good = {})
      : Error(what), step_(step), last_good_(std::move(last_good)) {}

  std::size_t step() const { return step_; }
  /// Path of the last checkpoint holding finite parameters (may be empty).
  const std::string& last_good_checkpoint() const { return last_good_; }

 private:
  std::size_t step_;
  std::string last_good_;
};

}  // namespace atlas
