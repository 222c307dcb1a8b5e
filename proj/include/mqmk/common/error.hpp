#pragma once

#include <stdexcept>
#include <string>

namespace mqmk {

// Shape constraint violated by a graph primitive. Message names the
// primitive and the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric-domain violation (degenerate vector, out-of-range label, ...).
class ValueError : public std::runtime_error {
 public:
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed binary artifact (bad magic, version, length, checksum).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid experiment configuration. Carries the full diagnostic list so the
// CLI can print every problem at once.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mqmk
