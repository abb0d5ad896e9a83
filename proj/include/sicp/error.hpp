#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sicp {

enum class ErrorKind {
  ShapeMismatch,
  NonScalarObjective,
  DegenerateAffine,
  GridMismatch,
  RejectionBudget,
  DegenerateBox,
  UndefinedRecall,
  MalformedMessage,
  CorruptPayload,
  Truncated,
  IncompatibleCheckpoint,
  MissingCheckpoint,
  Config,
  NumericalFailure,
  Io,
};

std::string_view to_string(ErrorKind kind);

// Every failure the library reports is an Error carrying a kind, so callers
// can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace sicp
