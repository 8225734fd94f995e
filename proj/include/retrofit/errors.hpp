// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace retrofit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mismatched tensor extents.
struct ShapeError : Error {
  using Error::Error;
};
// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};
// Bad user data: token ids, corpora.
struct InputError : Error {
  using Error::Error;
};
struct PlanError : Error {
  using Error::Error;
};
// Checkpoint / file schema problems.
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct NonFiniteError : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace retrofit
