#include "cir/error.hpp"

namespace cir {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::InvalidTemperature: return "InvalidTemperature";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::SplitLeak: return "SplitLeak";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::NoNegative: return "NoNegative";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::UnknownTarget: return "UnknownTarget";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Parse: return "Parse";
  }
  return "Unknown";
}

}  // namespace cir
