#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace plaqnet {

/// Failure categories surfaced by the library. The CLI maps these onto exit
/// codes, so each kind that a caller may want to handle separately gets its
/// own enumerator.
enum class ErrorKind {
    Shape,
    Usage,
    Numeric,
    DegenerateBatch,
    DegenerateHistogram,
    NoTissue,
    MissingClass,
    UnusableImage,
    EmptyMask,
    CorruptCheckpoint,
    FingerprintMismatch,
    VersionMismatch,
    Architecture,
    Divergence,
    Spec,
    Config,
    Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace plaqnet
