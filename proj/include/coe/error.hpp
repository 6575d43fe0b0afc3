#pragma once

#include <stdexcept>
#include <string>

namespace coe {

enum class ErrorKind {
  kInvariantViolation,
  kInvalidRange,
  kContextOverflow,
  kNonFiniteLoss,
  kGroupTooSmall,
  kRewardUnavailable,
  kLengthMismatch,
  kFewerThanTwoCandidates,
  kEmptyVerdicts,
  kEmptyOptionSegment,
  kConfigError,
  kIoError,
};

const char* to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` carries the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvariantViolation: return "invariant-violation";
    case ErrorKind::kInvalidRange: return "invalid-range";
    case ErrorKind::kContextOverflow: return "context-overflow";
    case ErrorKind::kNonFiniteLoss: return "non-finite-loss";
    case ErrorKind::kGroupTooSmall: return "group-too-small";
    case ErrorKind::kRewardUnavailable: return "reward-unavailable";
    case ErrorKind::kLengthMismatch: return "length-mismatch";
    case ErrorKind::kFewerThanTwoCandidates: return "fewer-than-two-candidates";
    case ErrorKind::kEmptyVerdicts: return "empty-verdicts";
    case ErrorKind::kEmptyOptionSegment: return "empty-option-segment";
    case ErrorKind::kConfigError: return "config-error";
    case ErrorKind::kIoError: return "io-error";
  }
  return "unknown";
}

}  // namespace coe
