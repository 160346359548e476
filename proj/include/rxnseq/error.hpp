#pragma once

#include <stdexcept>
#include <string>

namespace rxnseq {

enum class ErrorCode {
    UnmatchedInput,
    EmptyResult,
    MalformedReaction,
    DuplicatePiece,
    EmptyFile,
    IoError,
    IdOutOfRange,
    EmptyCorpus,
    ShapeMismatch,
    MalformedLine,
    MissingTask,
    FractionTooLarge,
    AllPositionsMasked,
    NonFiniteGradient,
    NonFiniteLoss,
    SourceTooLong,
    IndexMismatch,
    MalformedPredictions,
    PositionOutOfRange,
    TooManyTokens,
    BadCheckpoint,
    VocabHashMismatch,
    BadConfig,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace rxnseq
