#include "plaqnet/error.hpp"

namespace plaqnet {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Shape: return "shape error";
        case ErrorKind::Usage: return "usage error";
        case ErrorKind::Numeric: return "numeric error";
        case ErrorKind::DegenerateBatch: return "degenerate batch";
        case ErrorKind::DegenerateHistogram: return "degenerate histogram";
        case ErrorKind::NoTissue: return "no tissue";
        case ErrorKind::MissingClass: return "missing class";
        case ErrorKind::UnusableImage: return "unusable image";
        case ErrorKind::EmptyMask: return "empty mask";
        case ErrorKind::CorruptCheckpoint: return "corrupt checkpoint";
        case ErrorKind::FingerprintMismatch: return "fingerprint mismatch";
        case ErrorKind::VersionMismatch: return "version mismatch";
        case ErrorKind::Architecture: return "architecture error";
        case ErrorKind::Divergence: return "training divergence";
        case ErrorKind::Spec: return "spec error";
        case ErrorKind::Config: return "config error";
        case ErrorKind::Io: return "io error";
    }
    return "error";
}

}  // namespace plaqnet
