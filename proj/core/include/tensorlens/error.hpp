#pragma once

#include <stdexcept>
#include <string>

namespace tensorlens {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree (operator dims, L/D mismatch, head layout).
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A precondition on values (not shapes) was violated.
class ValueError : public Error {
public:
    using Error::Error;
};

/// Index (position, channel, class, token id) out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Dense materialization would exceed the configured entry cap.
class MemoryCapError : public Error {
public:
    using Error::Error;
};

/// Tensor was built in the wrong bias mode for the requested operation.
class BiasModeError : public Error {
public:
    using Error::Error;
};

/// Trace does not belong to the model / layer range it is used with.
class TraceMismatchError : public Error {
public:
    using Error::Error;
};

// File format errors. Each failure class of the container loader has its own
// type so callers (and the fuzz tests) can tell them apart.
class FormatError : public Error {
public:
    using Error::Error;
};
class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};
class ShapeMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedPayloadError : public FormatError {
public:
    using FormatError::FormatError;
};
class MetadataError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Dataset record could not be parsed or validated; carries the 1-based line.
class DatasetError : public Error {
public:
    DatasetError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace tensorlens
