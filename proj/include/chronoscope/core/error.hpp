#pragma once

#include <stdexcept>
#include <string>

namespace chronoscope {

enum class ErrorKind {
  Validation,  // bad input, violated precondition
  Numeric,     // divergence, non-convergence, non-finite values
  Undefined,   // metric not defined on the given data
  Dependency,  // missing upstream artifact
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorKind::Validation, what);
}

// Process exit code for an error kind; 2 for bad input, 3 for numeric failure.
inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Numeric:
    case ErrorKind::Undefined:
      return 3;
    default:
      return 2;
  }
}

}  // namespace chronoscope
