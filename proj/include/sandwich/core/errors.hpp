#pragma once

#include <stdexcept>
#include <string>

namespace sandwich {

// Exit-code taxonomy used by the CLI:
//   ValidationError family -> 2, PrivacyViolationError -> 3, IoError family -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValidationError : Error {
    using Error::Error;
};

struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

// Wanted channel name absent from a descriptor.
struct ChannelLookupError : ValidationError {
    using ValidationError::ValidationError;
};

// Set grouping with inconsistent per-set trial counts.
struct GroupingError : ValidationError {
    using ValidationError::ValidationError;
};

// No head (or checkpoint) available for the requested dataset.
struct RoutingError : ValidationError {
    using ValidationError::ValidationError;
};

struct UnsupportedError : ValidationError {
    using ValidationError::ValidationError;
};

struct EstimationError : ValidationError {
    using ValidationError::ValidationError;
};

struct IoError : Error {
    using Error::Error;
};

struct MissingBlobError : IoError {
    using IoError::IoError;
};

struct ChecksumError : IoError {
    using IoError::IoError;
};

struct BlobShapeError : IoError {
    using IoError::IoError;
};

struct FormatError : IoError {
    using IoError::IoError;
};

struct PrivacyViolationError : Error {
    using Error::Error;
};

}  // namespace sandwich
