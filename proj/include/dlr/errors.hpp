#pragma once

#include <stdexcept>
#include <string>

namespace dlr {

// Bad configuration (flags, config file, incompatible hyperparameters).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An upstream artifact (vocab, checkpoint, codes file) is absent or unusable.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input or artifact bytes.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Divergence or invalid numerics (NaN loss, NaN encodings).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dlr
