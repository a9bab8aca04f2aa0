#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rexa {

/// Predefined VM exception signals. User codes start at kFirstUserException.
enum class ExceptionCode : std::int16_t {
  none = 0,
  trap = 1,
  stack = 2,
  interrupt = 3,
  io = 4,
  timeout = 5,
  divbyzero = 6,
};

inline constexpr std::int16_t kFirstUserException = 16;

std::string_view exception_name(std::int16_t code);
/// Returns 0 when `name` is not a predefined exception.
std::int16_t exception_from_name(std::string_view name);

/// Base for all host-side errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TableError : public Error {
 public:
  using Error::Error;
};

/// Code segment exhausted (distinct from stack overflow, which is a VM fault).
class CsExhausted : public Error {
 public:
  using Error::Error;
};

class FrameLocked : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IosError : public Error {
 public:
  using Error::Error;
};

class DspError : public Error {
 public:
  using Error::Error;
};

enum class CompileErrorKind : std::uint8_t {
  syntax,
  unknown_word,
  literal_range,
  cs_exhausted,
  import_missing,
  in_place_overrun,
};

/// Positioned compile diagnostic. `offset` is relative to the frame start.
class CompileError : public Error {
 public:
  CompileError(CompileErrorKind kind, std::uint16_t frame, std::size_t offset, std::string message);

  CompileErrorKind kind() const { return kind_; }
  std::uint16_t frame() const { return frame_; }
  std::size_t offset() const { return offset_; }
  const std::string& message() const { return message_; }

 private:
  CompileErrorKind kind_;
  std::uint16_t frame_;
  std::size_t offset_;
  std::string message_;
};

/// Raised inside the interpreter; caught by the dispatch loop and turned into
/// a VM exception signal. It never escapes vmloop.
struct VmFault {
  std::int16_t code;
  explicit VmFault(ExceptionCode c) : code(static_cast<std::int16_t>(c)) {}
  explicit VmFault(std::int16_t c) : code(c) {}
};

}  // namespace rexa
