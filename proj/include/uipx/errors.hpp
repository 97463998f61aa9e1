#pragma once

#include <stdexcept>
#include <string>

namespace uipx {

/// Invalid user input: malformed config, parameters outside their domain.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Precondition violated by a caller (argument outside an operation's domain).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A numerical procedure could not produce a trustworthy result
/// (singular matrix, CFL violation, NaN, Riccati blow-up, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An oracle comparison failed its tolerance.
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace uipx
