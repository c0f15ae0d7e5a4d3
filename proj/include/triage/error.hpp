#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace triage {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    NonFinite,
    EmptyClass,
    DigestMismatch,
    VersionMismatch,
    Truncated,
    Malformed,
    Schema,
    Io,
    NotFound,
    Config,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "invalid argument";
        case ErrorCode::ShapeMismatch: return "shape mismatch";
        case ErrorCode::NonFinite: return "non-finite value";
        case ErrorCode::EmptyClass: return "empty class";
        case ErrorCode::DigestMismatch: return "digest mismatch";
        case ErrorCode::VersionMismatch: return "version mismatch";
        case ErrorCode::Truncated: return "truncated input";
        case ErrorCode::Malformed: return "malformed input";
        case ErrorCode::Schema: return "schema violation";
        case ErrorCode::Io: return "i/o error";
        case ErrorCode::NotFound: return "not found";
        case ErrorCode::Config: return "invalid config";
    }
    return "unknown error";
}

// Every library failure is reported through this type; `code()` lets callers
// (the CLI in particular) tell failure classes apart without parsing text.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

}  // namespace triage
