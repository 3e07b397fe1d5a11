#pragma once

#include <stdexcept>
#include <string>

namespace svfreg {

/// Raised when a loss, parameter set or displacement becomes non-finite.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace svfreg
