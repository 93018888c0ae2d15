#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace transfo {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or hyperparameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Model input carrying an out-of-range id.
class InputError : public Error {
public:
    InputError(const std::string& what, std::size_t position)
        : Error(what + " (position " + std::to_string(position) + ")"), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

/// The mandatory part of a model input does not fit the length budget.
class InputTooLongError : public Error {
public:
    using Error::Error;
};

/// Token ids that cannot be rendered back to text.
class DecodeError : public Error {
public:
    DecodeError(const std::string& what, std::size_t position)
        : Error(what + " (position " + std::to_string(position) + ")"), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

/// Beam search ran out of admissible hypotheses before finishing any.
class DecodeExhaustedError : public Error {
public:
    using Error::Error;
};

/// Data that cannot support the requested operation (e.g. too few distractors).
class DataError : public Error {
public:
    using Error::Error;
};

/// Malformed dataset file; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Corrupt, truncated or incompatible checkpoint file.
class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Training diverged or otherwise had to abort.
class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace transfo
