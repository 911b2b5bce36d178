#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace medmap {

// All model math runs in double; on-disk voxel payloads are float32 (see volume.hpp).
using real = double;

// Bad inputs, bad configs, contract violations detectable before work starts.
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Filesystem and serialization failures.
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Numerical failures mid-run: NaN loss, degenerate normalization.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace medmap
