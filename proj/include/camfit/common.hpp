#pragma once

// Shared error taxonomy and small helpers. Every failure the library can
// produce maps to one of these types so callers (and the CLI) can translate
// them to exit codes without string matching.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace camfit {

// Invalid or inconsistent configuration (bad dims, unknown mode, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

// Invalid argument to an operation (shape mismatch, tau <= 0, ...).
struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& m) : std::runtime_error("argument error: " + m) {}
};

// Operation called in a state that cannot serve it (empty queue, ...).
struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error("state error: " + m) {}
};

// Non-finite values or numerically impossible requests.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};

// Filesystem-level failures (missing file, unwritable directory).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

// Structurally invalid file contents (bad magic, version, truncation).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error("format error: " + m) {}
};

// Dataset-level problems (empty class, missing image, bad manifest).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error("data error: " + m) {}
};

// Misuse of the API that is a programming error rather than bad user input
// (e.g. asking for a gradient of a constant).
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error("usage error: " + m) {}
};

#define CAMFIT_CHECK(cond, ErrType, msg) \
    do {                                  \
        if (!(cond)) throw ErrType(msg);  \
    } while (0)

}  // namespace camfit
