#pragma once

#include <stdexcept>
#include <string>

namespace occ {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents or ranks between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN or Inf. The message names the op.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Query generation found nothing to attend from.
class DegenerateSceneError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind { BadMagic, BadVersion, Truncated, Corrupt, Io };

const char* to_string(FormatErrorKind kind);

class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace occ
