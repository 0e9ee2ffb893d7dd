#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdid {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class UninitializedGradientError : public Error {
public:
    using Error::Error;
};

class InvalidDeltaError : public Error {
public:
    using Error::Error;
};

class MissingTargetError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Malformed binary input; offset is the byte position where parsing stopped.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class ManifestError : public Error {
public:
    explicit ManifestError(std::vector<std::string> errors);

    const std::vector<std::string>& errors() const noexcept { return errors_; }

private:
    std::vector<std::string> errors_;
};

}  // namespace tdid
