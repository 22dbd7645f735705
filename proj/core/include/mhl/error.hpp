#pragma once

#include <stdexcept>
#include <string>

namespace mhl {

/// Failure category. Maps one-to-one onto CLI exit codes.
enum class ErrorKind {
  kConfig = 1,   // usage or configuration problems
  kData = 2,     // malformed / missing / inconsistent input data
  kNumeric = 3,  // non-finite values, divergence
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] void throw_config(const std::string& msg);
[[noreturn]] void throw_data(const std::string& msg);
[[noreturn]] void throw_numeric(const std::string& msg);

}  // namespace mhl
