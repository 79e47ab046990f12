#pragma once

#include <stdexcept>
#include <string>

namespace milpath {

// Base for every domain failure. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes/dimensions do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A forward value or input became NaN/Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed file or payload (bad magic, truncated, unparsable cell, ...).
class FormatError : public Error {
public:
    using Error::Error;
};

class NetworkError : public Error {
public:
    NetworkError(const std::string& what, bool retryable)
        : Error(what), retryable_(retryable) {}
    bool retryable() const noexcept { return retryable_; }

private:
    bool retryable_;
};

}  // namespace milpath
