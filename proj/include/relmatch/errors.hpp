#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace relmatch {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input text (Newick, CSV, config). Carries the position that
// triggered the failure: a byte offset for single-line formats, a line
// number for line-oriented ones.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t where)
        : Error(msg), position(where) {}
    std::size_t position;
};

// Structurally valid input that violates a documented invariant
// (ragged tree, duplicate species, shape mismatch, ...).
struct ValidationError : Error {
    using Error::Error;
};

// Bad configuration: unknown key, out-of-range value, hash mismatch.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem trouble: missing input, unwritable output.
struct IoError : Error {
    using Error::Error;
};

// A run that started fine and then went wrong (non-finite loss, ...).
struct RunError : Error {
    using Error::Error;
};

}  // namespace relmatch
