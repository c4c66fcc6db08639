#pragma once

#include <stdexcept>
#include <string>

namespace vssm {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Mismatched or invalid tensor extents.
struct ShapeError : Error {
    using Error::Error;
};

/// Value outside an operation's mathematical domain (non-finite result,
/// non-positive step size, unstable state matrix, ...).
struct DomainError : Error {
    using Error::Error;
};

/// A callback or composite violated its declared contract
/// (e.g. a hook returned the wrong shape).
struct ContractError : Error {
    using Error::Error;
};

/// Bad configuration file or inconsistent configuration values.
struct ConfigError : Error {
    using Error::Error;
};

/// File format / serialization problems.
struct IoError : Error {
    using Error::Error;
};

}  // namespace vssm
