#pragma once

#include <stdexcept>
#include <string>

namespace mpdc {

/// Bad input: malformed configuration, violated precondition, shape mismatch.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numerical procedure produced non-finite values or could not proceed.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mpdc
