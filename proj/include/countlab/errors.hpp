#pragma once

#include <stdexcept>
#include <string>

namespace countlab {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  ok = 0,
  usage = 1,
  data = 2,
  divergence = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Precondition violated by the caller.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ExitCode::usage, what) {}
};

/// Invalid or unknown configuration field.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::usage, what) {}
};

/// Malformed input data, insufficient pools, I/O failures.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::data, what) {}
};

/// Non-finite loss during optimization.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(ExitCode::divergence, what) {}
};

}  // namespace countlab
