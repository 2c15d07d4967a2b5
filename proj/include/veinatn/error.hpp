// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace veinatn {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or parameter shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents: bad header, truncation, checksum failure.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or missing key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Autodiff misuse, e.g. a second backward pass over the same tape.
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace veinatn
