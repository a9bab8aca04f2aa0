#include "rexa/error.hpp"

#include <array>
#include <utility>

namespace rexa {

namespace {
constexpr std::array<std::pair<std::int16_t, std::string_view>, 6> kNames{{
    {1, "trap"},
    {2, "stack"},
    {3, "interrupt"},
    {4, "io"},
    {5, "timeout"},
    {6, "divbyzero"},
}};
}  // namespace

std::string_view exception_name(std::int16_t code) {
  for (const auto& [c, n] : kNames)
    if (c == code) return n;
  return code >= kFirstUserException ? "user" : "unknown";
}

std::int16_t exception_from_name(std::string_view name) {
  for (const auto& [c, n] : kNames)
    if (n == name) return c;
  return 0;
}

CompileError::CompileError(CompileErrorKind kind, std::uint16_t frame, std::size_t offset, std::string message)
    : Error("compile error in frame " + std::to_string(frame) + " at offset " + std::to_string(offset) + ": " +
            message),
      kind_(kind),
      frame_(frame),
      offset_(offset),
      message_(std::move(message)) {}

}  // namespace rexa
