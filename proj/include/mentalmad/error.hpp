#pragma once

#include <stdexcept>
#include <string>

namespace mentalmad {

// Failure classes. The CLI maps each to a distinct exit code and error prefix.
enum class ErrorKind { config, upstream, data };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Invalid configuration, arguments or violated preconditions on parameters.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

/// Teacher endpoint or trainer process failed.
class UpstreamError : public Error {
public:
    explicit UpstreamError(const std::string& what) : Error(ErrorKind::upstream, what) {}
};

/// Malformed or inconsistent data.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

inline int exitCode(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::upstream: return 3;
    case ErrorKind::data: return 4;
    }
    return 1;
}

inline const char* errorPrefix(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::config: return "error[config]";
    case ErrorKind::upstream: return "error[upstream]";
    case ErrorKind::data: return "error[data]";
    }
    return "error";
}

} // namespace mentalmad
