#pragma once

#include <stdexcept>
#include <string>

namespace tim {

/// Argument outside the valid time range of a transport or warp.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A denominator fell below the degeneracy threshold.
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes, layouts or cached state do not match.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A training or sampling step produced non-finite values.
class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unknown configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Threshold below which |C|, |b| or |dB/dt| is treated as zero.
inline constexpr double kDegenerateEps = 1e-12;

}  // namespace tim
