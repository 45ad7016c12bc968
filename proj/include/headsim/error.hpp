#pragma once

#include <stdexcept>
#include <string>

namespace headsim {

// Failure categories map one-to-one onto CLI exit codes.
enum class ErrorKind {
  kInvalidArgument,  // caller passed inconsistent shapes or options
  kBundle,           // on-disk inputs missing or malformed
  kNumerical,        // rank deficiency, singular Gram, degenerate input
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorKind::kInvalidArgument, what) {}
};

class BundleError : public Error {
 public:
  explicit BundleError(const std::string& what)
      : Error(ErrorKind::kBundle, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorKind::kNumerical, what) {}
};

}  // namespace headsim
