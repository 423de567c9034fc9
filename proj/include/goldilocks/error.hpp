// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace goldilocks {

enum class ErrorCode {
  InvalidGroup,
  DegenerateProbability,
  MalformedRollout,
  MixedBatchViolation,
  InvalidSize,
  InvalidInput,
  ShapeMismatch,
  InsufficientCandidates,
  AlignmentError,
  EmptyReport,
  Config,
  Io,
  Protocol,
  UnknownQuestion,
  Transport,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidGroup: return "invalid-group";
    case ErrorCode::DegenerateProbability: return "degenerate-probability";
    case ErrorCode::MalformedRollout: return "malformed-rollout";
    case ErrorCode::MixedBatchViolation: return "mixed-batch-violation";
    case ErrorCode::InvalidSize: return "invalid-size";
    case ErrorCode::InvalidInput: return "invalid-input";
    case ErrorCode::ShapeMismatch: return "shape-mismatch";
    case ErrorCode::InsufficientCandidates: return "insufficient-candidates";
    case ErrorCode::AlignmentError: return "alignment-error";
    case ErrorCode::EmptyReport: return "empty-report";
    case ErrorCode::Config: return "config";
    case ErrorCode::Io: return "io";
    case ErrorCode::Protocol: return "protocol";
    case ErrorCode::UnknownQuestion: return "unknown-question";
    case ErrorCode::Transport: return "transport";
  }
  return "unknown";
}

inline ErrorCode error_code_from_string(std::string_view s) noexcept {
  for (int i = 0; i <= static_cast<int>(ErrorCode::Transport); ++i) {
    const auto c = static_cast<ErrorCode>(i);
    if (to_string(c) == s) return c;
  }
  return ErrorCode::Protocol;
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the wire protocol) can branch on the kind without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised for socket failures; a caller may retry the step.
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& what) : Error(ErrorCode::Transport, what) {}
};

}  // namespace goldilocks
