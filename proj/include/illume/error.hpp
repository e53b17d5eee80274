#pragma once

#include <stdexcept>
#include <string>

namespace illume {

// Thrown when an operation's input violates its documented preconditions
// (shape mismatch, out-of-range index, non-finite value, ...).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on malformed files, missing checkpoints, config-hash mismatches.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace illume
