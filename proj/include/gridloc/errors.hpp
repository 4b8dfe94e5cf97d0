#pragma once

#include <stdexcept>
#include <string>

namespace gridloc {

// Bad user input: malformed config, shape mismatch, missing file.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runtime numeric failure: NaN/Inf in a pass, checksum mismatch, divergence.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Procedural generation could not satisfy its constraints (e.g. placement
// rejection budget exhausted).
class GenerationError : public std::runtime_error {
public:
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure: unreadable, unwritable, or truncated file.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace gridloc
