#include "tslformer/error.hpp"

namespace tslformer {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::BadNumber: return "BadNumber";
    case ErrorCode::HeaderMismatch: return "HeaderMismatch";
    case ErrorCode::InconsistentLabel: return "InconsistentLabel";
    case ErrorCode::ZeroFrames: return "ZeroFrames";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadProbability: return "BadProbability";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::DetachedLoss: return "DetachedLoss";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::OddDimension: return "OddDimension";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::BadK: return "BadK";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::ClassTooSmall: return "ClassTooSmall";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::CorruptPayload: return "CorruptPayload";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::TooFewFrames: return "TooFewFrames";
    case ErrorCode::EmptyClip: return "EmptyClip";
    case ErrorCode::Io: return "Io";
    case ErrorCode::UnknownSubcommand: return "UnknownSubcommand";
    case ErrorCode::MissingFlag: return "MissingFlag";
  }
  return "Unknown";
}

}  // namespace tslformer
