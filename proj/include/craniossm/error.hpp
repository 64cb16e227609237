#pragma once

#include <stdexcept>
#include <string>

namespace craniossm {

// Failure categories map one-to-one onto CLI exit codes.
enum class ErrorKind { Usage = 1, Io = 2, Numerical = 3, Validation = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};
struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};
struct NumericalError : Error {
    explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};
struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

// Non-fatal diagnostics. Goes to stderr unless silenced (tests silence it).
void warn(const std::string& message);
void set_warnings_enabled(bool enabled);
bool warnings_enabled();

}  // namespace craniossm
