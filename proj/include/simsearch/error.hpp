#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace simsearch {

enum class ErrorCode {
  ZeroVector,
  NonFinite,
  DimMismatch,
  WidthMismatch,
  InsufficientData,
  DegenerateRank,
  DuplicateId,
  ShortlistTooSmall,
  InvalidArgument,
  IoError,
  CorruptSnapshot,
  VersionUnsupported,
  DegenerateActivation,
  NoValidPairs,
  NoNegatives,
  ShapeMismatch,
  InsufficientClasses,
  UnlabeledData,
  EmptyIndex,
  MalformedRecord,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::WidthMismatch: return "WidthMismatch";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::DegenerateRank: return "DegenerateRank";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::ShortlistTooSmall: return "ShortlistTooSmall";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::CorruptSnapshot: return "CorruptSnapshot";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::DegenerateActivation: return "DegenerateActivation";
    case ErrorCode::NoValidPairs: return "NoValidPairs";
    case ErrorCode::NoNegatives: return "NoNegatives";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InsufficientClasses: return "InsufficientClasses";
    case ErrorCode::UnlabeledData: return "UnlabeledData";
    case ErrorCode::EmptyIndex: return "EmptyIndex";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the HTTP layer, the CLI) can map it to a status without parsing
/// messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace simsearch
