#pragma once

#include <stdexcept>
#include <string>

namespace gpsens {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Requested dimension exceeds the embedded direction-number table.
class DimensionUnsupported : public Error {
public:
    using Error::Error;
};

/// Matrix or vector arguments with inconsistent sizes.
class ShapeMismatch : public Error {
public:
    using Error::Error;
};

/// Non-finite value (NaN or infinity) where a finite number is required.
class NumericalDomain : public Error {
public:
    using Error::Error;
};

/// Cholesky factorization failed even after the jitter ladder.
class IllConditionedKernel : public Error {
public:
    using Error::Error;
};

/// Every hyperparameter optimization restart failed.
class FitFailed : public Error {
public:
    using Error::Error;
};

/// Output variance too small to normalize sensitivity indices.
class DegenerateVariance : public Error {
public:
    using Error::Error;
};

/// A design block required by the requested estimator is absent.
class DesignIncomplete : public Error {
public:
    using Error::Error;
};

/// Input point lies outside the declared parameter ranges.
class DomainError : public Error {
public:
    using Error::Error;
};

/// File exists but its header or field layout is wrong.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Malformed cell content; carries the 1-based row and column.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t row, std::size_t col)
        : Error(what + " (row " + std::to_string(row) + ", column " + std::to_string(col) + ")"),
          row_(row), col_(col) {}

    std::size_t row() const noexcept { return row_; }
    std::size_t col() const noexcept { return col_; }

private:
    std::size_t row_;
    std::size_t col_;
};

/// Invalid or inconsistent run configuration, or a stale artifact.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// External model invocation failed for an entire batch.
class ModelExecutionError : public Error {
public:
    using Error::Error;
};

}  // namespace gpsens
