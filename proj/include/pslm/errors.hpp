#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pslm {

// Bad argument or violated precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A text sequence does not fit into the speech-aligned region it must share.
class TextTooLong : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Input sequence exceeds the model's maximum context.
class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Malformed file, schema or config.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace detail
}  // namespace pslm
