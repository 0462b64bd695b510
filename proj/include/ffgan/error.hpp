#pragma once

#include <stdexcept>
#include <string>

namespace ffgan {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes or dimensions do not agree with an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Misuse of an API: bad argument values, wrong call order.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A loss became NaN or infinite during training.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Problems reading a flat-tensor container or other on-disk artifact.
class FormatError : public Error {
public:
    enum class Kind { bad_magic, bad_version, truncated, missing_record, bad_content, io };

    FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

} // namespace ffgan
