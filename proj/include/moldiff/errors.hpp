//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace moldiff {

class ShapeMismatchError : public std::invalid_argument {
 public:
  explicit ShapeMismatchError(const std::string& what)
      : std::invalid_argument("shape mismatch: " + what) {}
};

}  // namespace moldiff
