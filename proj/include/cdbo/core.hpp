#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cdbo {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or violated precondition (CLI exit code 2).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, failed root finds, non-symmetric Hessians (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// File system failures (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

struct OracleCounts {
  std::int64_t f = 0;
  std::int64_t g = 0;
  std::int64_t grad = 0;
  std::int64_t hess = 0;

  OracleCounts& operator+=(const OracleCounts& o) {
    f += o.f;
    g += o.g;
    grad += o.grad;
    hess += o.hess;
    return *this;
  }
  friend bool operator==(const OracleCounts&, const OracleCounts&) = default;
};

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InputError(what);
}

}  // namespace cdbo
