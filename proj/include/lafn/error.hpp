#pragma once

#include <stdexcept>
#include <string>

namespace lafn {

enum class ErrorKind {
    validation,  // bad input data or arguments
    shape,       // tensor shape contract violated
    format,      // container file could not be decoded
    io,          // filesystem failure
    numeric,     // NaN/Inf or divergence
    transport,   // network client failure (retriable)
    runtime,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::validation: return "validation";
        case ErrorKind::shape: return "shape";
        case ErrorKind::format: return "format";
        case ErrorKind::io: return "io";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::transport: return "transport";
        case ErrorKind::runtime: return "runtime";
    }
    return "runtime";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    bool retriable() const noexcept { return kind_ == ErrorKind::transport; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace lafn
