#pragma once

#include <stdexcept>
#include <string>

namespace rpe2d {

// Invalid or inconsistent configuration (odd dims, unknown keys, width mismatch).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Tensor extents that do not fit together.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// More positions requested than the position range can hold.
struct CapacityError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Bad user input: labels out of range, images too small, unreadable files.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values reached a place where they must not be.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rpe2d
