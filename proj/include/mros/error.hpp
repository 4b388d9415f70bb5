#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace mros {

// Error hierarchy. Each category maps onto one CLI exit code (see cli).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Stripe/feature-map geometry that cannot be partitioned as requested.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an API call (bad argument, bad call order).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset layout, parsing, file format problems.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss, gradient or parameter during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat_message(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename E, typename... Args>
[[noreturn]] void raise(Args&&... args) {
  throw E(detail::concat_message(std::forward<Args>(args)...));
}

}  // namespace mros
