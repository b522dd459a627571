#pragma once

#include <stdexcept>
#include <string>

namespace regent {

// Base for all library errors. Subtypes map to CLI exit codes:
// validation/config/parameter -> 2, everything else -> 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A domain invariant does not hold; message names the offending field.
struct ValidationError : Error {
    using Error::Error;
};

// Malformed or truncated binary payload, bad magic, version mismatch.
struct FormatError : Error {
    using Error::Error;
};

// Mismatched vector lengths or image shapes.
struct DimensionError : Error {
    using Error::Error;
};

// An argument outside its documented range.
struct ParameterError : Error {
    using Error::Error;
};

// A scalar input outside the function's domain (e.g. negative distance).
struct DomainError : Error {
    using Error::Error;
};

struct RetrievalError : Error {
    using Error::Error;
};

struct CalibrationError : Error {
    using Error::Error;
};

struct PreprocessError : Error {
    using Error::Error;
};

// Caller broke a documented precondition (e.g. step after done).
struct ContractViolation : Error {
    using Error::Error;
};

// Bad experiment config file: unknown keys, unresolvable paths, overlaps.
struct ConfigError : Error {
    using Error::Error;
};

// An upstream artifact required by a command is missing.
struct DependencyError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace regent
