#pragma once

#include <stdexcept>
#include <string>

namespace ipck {

/// Failure category. The CLI maps each kind onto a process exit code.
enum class ErrorKind { config, data, runtime };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    int exit_code() const noexcept
    {
        switch (kind_) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::runtime: return 4;
        }
        return 4;
    }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class RuntimeError : public Error {
public:
    explicit RuntimeError(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

} // namespace ipck
