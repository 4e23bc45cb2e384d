#pragma once

#include <stdexcept>
#include <string>

namespace rrg {

// Error taxonomy shared across the pipeline. Every error carries a stable
// short code used as the diagnostic-stream prefix, and the process exit
// code the CLI maps it to:
//   usage   -> 1  (bad flags, bad config values, misused operations)
//   data    -> 2  (malformed files, id clashes, hash mismatches)
//   numeric -> 3  (shape mismatches, NaN gradients, degenerate inputs)
class Error : public std::runtime_error {
public:
    Error(std::string code, int exit_code, const std::string& msg)
        : std::runtime_error(msg), code_(std::move(code)), exit_code_(exit_code) {}

    const std::string& code() const { return code_; }
    int exit_code() const { return exit_code_; }

private:
    std::string code_;
    int exit_code_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error("usage", 1, msg) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error("data", 2, msg) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric", 3, msg) {}
};

} // namespace rrg
