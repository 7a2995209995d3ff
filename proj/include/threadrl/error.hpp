#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace threadrl {

// Base of every error thrown by the library. `code()` is a short stable
// token used by the CLI for its one-line error output.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& what)
        : std::runtime_error(what), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

// A record in a tree dump could not be decoded.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("parse", "line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// A decoded tree violates a structural invariant.
class ValidationError : public Error {
public:
    ValidationError(std::string tree_id, const std::string& what)
        : Error("validation", "tree '" + tree_id + "': " + what), tree_id_(std::move(tree_id)) {}

    const std::string& tree_id() const noexcept { return tree_id_; }

private:
    std::string tree_id_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class InvalidActionError : public Error {
public:
    explicit InvalidActionError(const std::string& what) : Error("invalid_action", what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& what) : Error("checkpoint", what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io", what) {}
};

}  // namespace threadrl
