#pragma once

#include <cstdint>
#include <limits>

namespace rexa {

/// Single stack word. All VM arithmetic on the data stack wraps at 16 bits.
using Cell = std::int16_t;

/// Signed 32-bit value carried as two cells. On the stack the most
/// significant word is pushed first, so the least significant word is on top.
struct DoubleCell {
  Cell msw = 0;
  Cell lsw = 0;

  static constexpr DoubleCell from(std::int32_t v) {
    const auto u = static_cast<std::uint32_t>(v);
    return {static_cast<Cell>(static_cast<std::uint16_t>(u >> 16)),
            static_cast<Cell>(static_cast<std::uint16_t>(u & 0xFFFFu))};
  }

  constexpr std::int32_t value() const {
    const std::uint32_t u = (static_cast<std::uint32_t>(static_cast<std::uint16_t>(msw)) << 16) |
                            static_cast<std::uint16_t>(lsw);
    return static_cast<std::int32_t>(u);
  }

  friend constexpr bool operator==(const DoubleCell&, const DoubleCell&) = default;
};

constexpr Cell wrap_cell(std::int64_t v) {
  return static_cast<Cell>(static_cast<std::uint16_t>(static_cast<std::uint64_t>(v) & 0xFFFFu));
}

constexpr Cell saturate_cell(std::int64_t v) {
  if (v > std::numeric_limits<Cell>::max()) return std::numeric_limits<Cell>::max();
  if (v < std::numeric_limits<Cell>::min()) return std::numeric_limits<Cell>::min();
  return static_cast<Cell>(v);
}

}  // namespace rexa
