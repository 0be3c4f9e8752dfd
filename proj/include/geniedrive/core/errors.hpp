#pragma once

#include <stdexcept>
#include <string>

namespace geniedrive {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (bad dims, unknown keys, out-of-range values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor or grid shapes that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A file whose header, magic bytes or manifest syntax is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A well-formed file whose parts disagree with each other (e.g. manifest count vs blob count).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// A binary blob that ends before the declared payload.
class TruncatedError : public Error {
 public:
  using Error::Error;
};

/// Training produced a NaN/Inf loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace geniedrive
