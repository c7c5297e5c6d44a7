#pragma once

#include <stdexcept>
#include <string>

namespace xtransct {

// Error taxonomy shared across the pipeline. The CLI maps these onto stable
// exit codes: ConfigError/ContractError -> 2, IoError -> 3, NumericError -> 4.

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid user-supplied configuration (flags, config file, geometry, dims).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Violated API precondition (shape mismatch, out-of-range coordinate, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// File I/O and on-disk format problems.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf detected during numeric work.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace xtransct
