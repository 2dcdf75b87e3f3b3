#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace millilabel {

enum class ErrorCode {
    MalformedFile,
    DimMismatch,
    IoFailure,
    ZeroVector,
    EmptySequence,
    TooFewPoints,
    Degenerate,
    TooFewFrames,
    BudgetExceedsPool,
    BadK,
    EmptyCluster,
    LengthMismatch,
    NoGroundTruth,
    SessionIncomplete,
    AllUnlabeled,
    NoLabeledData,
    NonFiniteLoss,
    UnknownFrame,
    MissingClustering,
    UnknownSession,
    OutOfOrder,
    InvalidClass,
    NothingToUndo,
    ConfigError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MalformedFile: return "MALFORMED_FILE";
        case ErrorCode::DimMismatch: return "DIM_MISMATCH";
        case ErrorCode::IoFailure: return "IO_FAILURE";
        case ErrorCode::ZeroVector: return "ZERO_VECTOR";
        case ErrorCode::EmptySequence: return "EMPTY_SEQUENCE";
        case ErrorCode::TooFewPoints: return "TOO_FEW_POINTS";
        case ErrorCode::Degenerate: return "DEGENERATE";
        case ErrorCode::TooFewFrames: return "TOO_FEW_FRAMES";
        case ErrorCode::BudgetExceedsPool: return "BUDGET_EXCEEDS_POOL";
        case ErrorCode::BadK: return "BAD_K";
        case ErrorCode::EmptyCluster: return "EMPTY_CLUSTER";
        case ErrorCode::LengthMismatch: return "LENGTH_MISMATCH";
        case ErrorCode::NoGroundTruth: return "NO_GROUND_TRUTH";
        case ErrorCode::SessionIncomplete: return "SESSION_INCOMPLETE";
        case ErrorCode::AllUnlabeled: return "ALL_UNLABELED";
        case ErrorCode::NoLabeledData: return "NO_LABELED_DATA";
        case ErrorCode::NonFiniteLoss: return "NON_FINITE_LOSS";
        case ErrorCode::UnknownFrame: return "UNKNOWN_FRAME";
        case ErrorCode::MissingClustering: return "MISSING_CLUSTERING";
        case ErrorCode::UnknownSession: return "UNKNOWN_SESSION";
        case ErrorCode::OutOfOrder: return "OUT_OF_ORDER";
        case ErrorCode::InvalidClass: return "INVALID_CLASS";
        case ErrorCode::NothingToUndo: return "NOTHING_TO_UNDO";
        case ErrorCode::ConfigError: return "CONFIG_ERROR";
    }
    return "UNKNOWN";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace millilabel
