#pragma once

#include <stdexcept>
#include <string>

namespace uamix {

enum class ErrorKind {
  Length,
  Input,
  Corruption,
  Format,
  Size,
  State,
  Bounds,
  Parameter,
  Shape,
  Capacity,
  Config,
  Io,
  Numerical,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Length: return "length error";
    case ErrorKind::Input: return "input error";
    case ErrorKind::Corruption: return "corruption error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Size: return "size error";
    case ErrorKind::State: return "state error";
    case ErrorKind::Bounds: return "bounds error";
    case ErrorKind::Parameter: return "parameter error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Capacity: return "capacity error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::Numerical: return "numerical error";
  }
  return "error";
}

/// Single exception type for the library; `kind()` tells callers which
/// contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace uamix
