#pragma once

#include <stdexcept>
#include <string>

namespace fanfreq {

/// Base of every error raised by the library. The category maps onto the
/// command-line exit codes (1 usage, 2 I/O, 3 numerical).
class Error : public std::runtime_error {
 public:
  enum class Kind { kUsage = 1, kIo = 2, kNumerical = 3 };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  Kind kind_;
};

/// Invalid argument, precondition or configuration.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(Kind::kUsage, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Kind::kIo, what) {}
};

/// Non-finite values, symmetry-breaking residues, failed gradient checks.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(Kind::kNumerical, what) {}
};

}  // namespace fanfreq
