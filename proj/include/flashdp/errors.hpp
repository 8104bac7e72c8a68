#pragma once

#include <stdexcept>
#include <string>

namespace flashdp {

// Mismatched tensor extents. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: precondition violations on the simulator, empty inputs, etc.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A scratch allocation would exceed the scratchpad capacity.
class CapacityError : public std::runtime_error {
 public:
  CapacityError(std::size_t requested_bytes, std::size_t available_bytes)
      : std::runtime_error("scratchpad capacity exceeded: requested " +
                           std::to_string(requested_bytes) + " bytes, " +
                           std::to_string(available_bytes) + " bytes available"),
        requested_(requested_bytes),
        available_(available_bytes) {}

  std::size_t requested_bytes() const noexcept { return requested_; }
  std::size_t available_bytes() const noexcept { return available_; }

 private:
  std::size_t requested_;
  std::size_t available_;
};

// Read of an all-reduce destination whose atomic updates are not yet visible.
class OrderingFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No block plan fits the scratchpad.
class InfeasiblePlan : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid scenario configuration; the message carries the offending key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while executing a scenario or training run (e.g. divergence).
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flashdp
