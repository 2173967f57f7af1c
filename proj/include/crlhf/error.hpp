#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace crlhf {

/// Machine-readable failure categories. The service and CLI surface these
/// verbatim through to_string().
enum class ErrorCode {
    kInvalidArgument,
    kShapeMismatch,
    kEmptySample,
    kDuplicate,
    kUnknownEntity,
    kRoundOpen,
    kRoundClosed,
    kIo,
    kSchema,
    kCorruption,
    kHashMismatch,
    kDiverged,
    kNotSingleObservation,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::kInvalidArgument: return "invalid-argument";
        case ErrorCode::kShapeMismatch: return "shape-mismatch";
        case ErrorCode::kEmptySample: return "empty-sample";
        case ErrorCode::kDuplicate: return "duplicate";
        case ErrorCode::kUnknownEntity: return "unknown-entity";
        case ErrorCode::kRoundOpen: return "round-open";
        case ErrorCode::kRoundClosed: return "round-closed";
        case ErrorCode::kIo: return "io";
        case ErrorCode::kSchema: return "schema";
        case ErrorCode::kCorruption: return "corruption";
        case ErrorCode::kHashMismatch: return "hash-mismatch";
        case ErrorCode::kDiverged: return "diverged";
        case ErrorCode::kNotSingleObservation: return "not-single-observation";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace crlhf
