#pragma once

#include <stdexcept>
#include <string>

namespace flex {

enum class ErrorKind {
  Shape,
  Parameter,
  Configuration,
  Numeric,
  DegenerateWeights,
  PersistedState,
  Generation,
  Usage,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Parameter: return "parameter error";
    case ErrorKind::Configuration: return "configuration error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::DegenerateWeights: return "degenerate weights";
    case ErrorKind::PersistedState: return "persisted-state error";
    case ErrorKind::Generation: return "generation error";
    case ErrorKind::Usage: return "usage error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit status for an error kind: 1 usage, 2 data/config, 3 numeric.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return 1;
    case ErrorKind::Numeric:
    case ErrorKind::DegenerateWeights: return 3;
    default: return 2;
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace flex
