#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cotrain {

/// Non-finite value produced by a forward computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite gradient or loss.
class DivergedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Configuration or argument failed validation.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed input file. `line()` is 1-based, 0 when not tied to a line.
class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace cotrain
