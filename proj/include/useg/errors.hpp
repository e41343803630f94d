#pragma once

#include <stdexcept>
#include <string>

namespace useg {

// Shape disagreement between tensors (element-wise ops, concat, conv, ...).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid argument outside shape mismatches: divisibility, geometry,
// out-of-range parameters, contract violations.
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent model / training configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset problems: unreadable files, undecodable images, pairing failures.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem and stream failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (training aborts).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint parsing failures, one kind per failure mode.
struct CheckpointError : std::runtime_error {
  enum class Kind { bad_magic, bad_version, truncated, mismatch, bad_config };
  CheckpointError(Kind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
  Kind kind;
};

}  // namespace useg
