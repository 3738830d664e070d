#pragma once

#include <stdexcept>
#include <string>

namespace widthlab {

// Every failure the library reports derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};
class IndexError : public Error {
 public:
  using Error::Error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};
class LengthError : public Error {
 public:
  using Error::Error;
};
class ConsistencyError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class PreconditionError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or update. Carries enough context to locate the batch.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A norm that a ratio divides by fell under the degeneracy threshold.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

}  // namespace widthlab
