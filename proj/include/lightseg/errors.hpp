#pragma once

#include <stdexcept>
#include <string>

namespace lightseg {

// Raised for malformed datasets, files and manifests (CLI exit code 2).
struct data_error : std::runtime_error {
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a computation produces or receives non-finite values
// (CLI exit code 3).
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lightseg
