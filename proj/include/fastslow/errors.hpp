#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fastslow {

enum class ErrorKind {
  kInvalidArgument,
  kConfigError,
  kNonFiniteCoefficient,
  kBlowUp,
  kPSDFailure,
  kNotCentered,
  kGridTooCoarse,
  kThetaOutOfRange,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
    case ErrorKind::kConfigError: return "ConfigError";
    case ErrorKind::kNonFiniteCoefficient: return "NonFiniteCoefficient";
    case ErrorKind::kBlowUp: return "BlowUp";
    case ErrorKind::kPSDFailure: return "PSDFailure";
    case ErrorKind::kNotCentered: return "NotCentered";
    case ErrorKind::kGridTooCoarse: return "GridTooCoarse";
    case ErrorKind::kThetaOutOfRange: return "ThetaOutOfRange";
  }
  return "Unknown";
}

/// Base of every exception thrown by the toolkit. `kind()` is what the CLI
/// maps onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

  /// True for failures of the numerics (as opposed to bad input).
  bool is_numerical() const noexcept {
    return kind_ == ErrorKind::kNonFiniteCoefficient ||
           kind_ == ErrorKind::kBlowUp || kind_ == ErrorKind::kPSDFailure ||
           kind_ == ErrorKind::kNotCentered ||
           kind_ == ErrorKind::kGridTooCoarse;
  }

 private:
  ErrorKind kind_;
};

#define FASTSLOW_DEFINE_ERROR(Name)                                    \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what)                             \
        : Error(ErrorKind::k##Name, std::string(#Name ": ") + what) {} \
  };

FASTSLOW_DEFINE_ERROR(InvalidArgument)
FASTSLOW_DEFINE_ERROR(ConfigError)
FASTSLOW_DEFINE_ERROR(NonFiniteCoefficient)
FASTSLOW_DEFINE_ERROR(BlowUp)
FASTSLOW_DEFINE_ERROR(PSDFailure)
FASTSLOW_DEFINE_ERROR(NotCentered)
FASTSLOW_DEFINE_ERROR(GridTooCoarse)
FASTSLOW_DEFINE_ERROR(ThetaOutOfRange)

#undef FASTSLOW_DEFINE_ERROR

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace fastslow
