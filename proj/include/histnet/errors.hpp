#pragma once

#include <stdexcept>

namespace histnet {

/// Invalid input or configuration detected before any work is done.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace histnet
