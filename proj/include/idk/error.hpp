#pragma once

#include <stdexcept>
#include <string>

namespace idk {

// Exception families map one-to-one onto CLI exit codes.

/// Invalid arguments, configuration, or preconditions (exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// Failures during a run: non-finite values, collapse aborts (exit code 2).
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

/// Missing, unreadable, unwritable, or corrupt files (exit code 3).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace idk

/// Throws idk::ConfigError with `msg` unless `cond` holds.
#define IDK_CHECK(cond, msg)                      \
  do {                                            \
    if (!(cond)) throw ::idk::ConfigError(msg);   \
  } while (0)
