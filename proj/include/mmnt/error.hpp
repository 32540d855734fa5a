#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace mmnt {

// Malformed or inconsistent serialized data. Carries the byte offset when the
// failure can be pinned to a position in a binary stream.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what,
                       std::optional<std::uint64_t> offset = std::nullopt)
      : std::runtime_error(offset ? what + " (at byte offset " +
                                        std::to_string(*offset) + ")"
                                  : what),
        offset_(offset) {}

  std::optional<std::uint64_t> offset() const noexcept { return offset_; }

 private:
  std::optional<std::uint64_t> offset_;
};

// Arguments or in-memory values violating an operation's preconditions.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace mmnt
