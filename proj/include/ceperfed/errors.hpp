#pragma once

#include <stdexcept>
#include <string>

namespace ceperfed {

/// Shape or layer-structure mismatch between values that must be compatible.
class StructuralError : public std::runtime_error {
public:
    explicit StructuralError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite value encountered where finite arithmetic is required.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Input that is formally valid but has no meaningful answer (e.g. all-zero spectrum).
class DegenerateInputError : public std::runtime_error {
public:
    explicit DegenerateInputError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration detected before any work starts.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Round protocol violation (missing upload, round mismatch, divergence).
class ProtocolError : public std::runtime_error {
public:
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

enum class WireErrc {
    Truncated,
    BadMagic,
    BadVersion,
    BadChecksum,
    ShapeOverflow,
    Malformed,
};

/// Decode failure; `code()` distinguishes the failure class.
class WireError : public std::runtime_error {
public:
    WireError(WireErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    WireErrc code() const { return code_; }

private:
    WireErrc code_;
};

}  // namespace ceperfed
