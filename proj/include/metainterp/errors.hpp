// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain of a function (log of a nonpositive entry, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the computation graph: foreign tape, constant input, ...
class GraphError : public Error {
 public:
  using Error::Error;
};

/// A set function was handed a set of unsupported size.
class CardinalityError : public Error {
 public:
  using Error::Error;
};

/// A class index set is empty where at least one example is required.
class MissingClassError : public Error {
 public:
  MissingClassError(int label, const std::string& where)
      : Error("class " + std::to_string(label) + " has no examples in " + where),
        label_(label) {}
  int label() const noexcept { return label_; }

 private:
  int label_;
};

/// Malformed input file. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or otherwise could not continue.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace mi
