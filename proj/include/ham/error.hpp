#pragma once

#include <stdexcept>
#include <string>

namespace ham {

// Base of every exception thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward pass or seen in a gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed configuration or bad user input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset or training-protocol violation (e.g. no complete samples for the
// Standard baseline, a mask requesting an absent modality).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Verification mismatch (gradcheck failure, reproducibility check).
class VerificationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ham
