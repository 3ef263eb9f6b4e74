#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tslformer {

enum class ErrorCode {
  // landmark data
  MalformedRow,
  BadNumber,
  HeaderMismatch,
  InconsistentLabel,
  ZeroFrames,
  DimensionMismatch,
  UnknownClass,
  // tensor engine
  ShapeMismatch,
  BadProbability,
  NotScalar,
  DetachedLoss,
  // model
  BadConfig,
  OddDimension,
  EmptyMask,
  SequenceTooLong,
  BadK,
  // training
  LabelOutOfRange,
  ClassTooSmall,
  EmptyDataset,
  // checkpoint / inference
  CorruptPayload,
  VersionMismatch,
  TruncatedFile,
  TooFewFrames,
  EmptyClip,
  Io,
  // cli
  UnknownSubcommand,
  MissingFlag,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can branch on the kind of error.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tslformer
