#pragma once

#include <stdexcept>
#include <string>

namespace entangle {

// Base for everything the library throws on purpose.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Bad argument or configuration value (out of range, inconsistent sizes).
class DomainError : public Error {
  public:
    using Error::Error;
};

// A numerical guarantee broke: positivity lost, quadrature did not converge,
// a record with zero probability was fed to an update.
class NumericalError : public Error {
  public:
    using Error::Error;
};

}  // namespace entangle
