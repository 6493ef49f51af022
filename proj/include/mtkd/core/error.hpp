#pragma once

#include <stdexcept>
#include <string>

namespace mtkd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or dimensions that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed input files (NIfTI, PNG corpora, checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment configuration. `pointer()` is the JSON pointer of the offending node.
class ConfigError : public Error {
public:
    ConfigError(std::string pointer, const std::string& message)
        : Error(pointer + ": " + message), pointer_(std::move(pointer)) {}

    const std::string& pointer() const noexcept { return pointer_; }

private:
    std::string pointer_;
};

} // namespace mtkd
