#pragma once

#include <stdexcept>
#include <string>

namespace patchforge {

// Error surfaces. Every failure the library reports derives from Error so
// the CLI can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not agree for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or unsupported configuration (layer geometry, plans, widths).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied data: labels, probabilities, boxes, images.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant; indicates a bug or misuse of retained state.
class InternalError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A layer graph the checkpoint engine cannot run (anything but a chain).
class TopologyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// File system or format failures; the message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace patchforge
