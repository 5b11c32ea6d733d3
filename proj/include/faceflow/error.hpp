#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace faceflow {

enum class ErrorCode {
  DegenerateInput,
  NonFinite,
  MismatchedSize,
  InvalidArgument,
  StoreSaturated,
  StaleLease,
  InvalidDistribution,
  SpawnFailure,
  ProtocolViolation,
  Timeout,
  DimensionMismatch,
  NotNormalized,
  EmptyGallery,
  UnknownIdentity,
  FormatError,
  ConfigError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::MismatchedSize: return "MismatchedSize";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::StoreSaturated: return "StoreSaturated";
    case ErrorCode::StaleLease: return "StaleLease";
    case ErrorCode::InvalidDistribution: return "InvalidDistribution";
    case ErrorCode::SpawnFailure: return "SpawnFailure";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::UnknownIdentity: return "UnknownIdentity";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so that
/// callers (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class StoreSaturated : public Error {
 public:
  explicit StoreSaturated(std::uint64_t frame_id)
      : Error(ErrorCode::StoreSaturated,
              "all buffered frames are leased; frame " + std::to_string(frame_id) + " dropped"),
        frame_id_(frame_id) {}

  std::uint64_t frame_id() const noexcept { return frame_id_; }

 private:
  std::uint64_t frame_id_;
};

}  // namespace faceflow
