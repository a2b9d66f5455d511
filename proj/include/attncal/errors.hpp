#pragma once

#include <stdexcept>
#include <string>

namespace attncal {

// Operand shapes do not agree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Value outside an operation's mathematical domain (e.g. log of a non-positive).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// API misuse: backward on a non-scalar, backward twice, frozen weights mutated, ...
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// A registered attention hook returned something unusable.
struct HookError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad or inconsistent configuration values.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Training or evaluation produced non-finite numbers.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace attncal
