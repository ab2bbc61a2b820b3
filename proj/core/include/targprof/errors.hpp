#pragma once

#include <stdexcept>
#include <string>

namespace targprof {

// Raised for malformed input: files, configs, CSV contents, bad flag values.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when estimation itself cannot proceed (positivity refusal, degenerate
// fits, solver failures that invalidate a requested output). CLI exit code 3.
class EstimationError : public std::runtime_error {
public:
  explicit EstimationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace targprof
