#pragma once

// Bytecode word encoding.
//
//   0x00..0x6F  core word opcodes (1 byte)
//   0x70..0x7F  compiler-inserted words, see `op` below
//   0x80..0xBF  short literal: 14-bit signed payload, lead low 6 bits ++ 1 byte
//   0xC0..0xFF  double literal: 30-bit signed payload, lead low 6 bits ++ 3 bytes
//
// Multi-byte operands (addresses, lengths, indices) are little-endian. The
// literal payload bytes are big-endian so that the lead byte carries the top
// bits.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace rexa {

namespace op {
inline constexpr std::uint8_t kBranch = 0x70;      // BRANCH addr16
inline constexpr std::uint8_t kZeroBranch = 0x71;  // 0BRANCH addr16
inline constexpr std::uint8_t kCall = 0x72;        // CALL addr16
inline constexpr std::uint8_t kExit = 0x73;
inline constexpr std::uint8_t kIos = 0x74;    // FIOS call, u16 index
inline constexpr std::uint8_t kAddr = 0x75;   // push 16-bit address/handle
inline constexpr std::uint8_t kLit = 0x76;    // push 16-bit single cell
inline constexpr std::uint8_t kStr = 0x77;    // print string: len u8, bytes
inline constexpr std::uint8_t kVar = 0x78;    // embedded scalar: 2 data bytes
inline constexpr std::uint8_t kArray = 0x79;  // embedded array: len u16, cells
inline constexpr std::uint8_t kDo = 0x7A;
inline constexpr std::uint8_t kLoop = 0x7B;      // LOOP addr16 (body start)
inline constexpr std::uint8_t kPlusLoop = 0x7C;  // +LOOP addr16
inline constexpr std::uint8_t kEnd = 0x7D;
inline constexpr std::uint8_t kReserved = 0x7E;
inline constexpr std::uint8_t kTrap = 0x7F;

inline constexpr std::uint8_t kFirstInternal = 0x70;
inline constexpr std::uint8_t kShortTag = 0x80;
inline constexpr std::uint8_t kDoubleTag = 0xC0;
}  // namespace op

inline constexpr std::int32_t kShortMin = -(1 << 13);
inline constexpr std::int32_t kShortMax = (1 << 13) - 1;
inline constexpr std::int32_t kDoubleMin = -(1 << 29);
inline constexpr std::int32_t kDoubleMax = (1 << 29) - 1;

struct EncodedWord {
  std::array<std::uint8_t, 4> bytes{};
  std::size_t length = 0;

  std::span<const std::uint8_t> view() const { return {bytes.data(), length}; }
};

inline bool fits_short(std::int32_t v) { return v >= kShortMin && v <= kShortMax; }
inline bool fits_double(std::int32_t v) { return v >= kDoubleMin && v <= kDoubleMax; }

/// Short form iff the value fits 14 bits, otherwise the double form.
/// Throws rexa::Error when the value is outside the 30-bit range.
EncodedWord encode_literal(std::int32_t v);
/// Always the 4-byte form (used for explicit double-word literals).
EncodedWord encode_double_literal(std::int32_t v);

struct DecodedLiteral {
  std::int32_t value = 0;
  std::size_t length = 0;
  bool is_double = false;
};

/// `p` must point at a lead byte >= 0x80 with enough bytes following.
inline DecodedLiteral decode_literal(const std::uint8_t* p) {
  if ((p[0] & 0xC0) == op::kDoubleTag) {
    std::uint32_t u = (static_cast<std::uint32_t>(p[0] & 0x3F) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
                      (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
    if (u & 0x20000000u) u |= 0xC0000000u;
    return {static_cast<std::int32_t>(u), 4, true};
  }
  std::uint32_t u = (static_cast<std::uint32_t>(p[0] & 0x3F) << 8) | p[1];
  if (u & 0x2000u) u |= 0xFFFFC000u;
  return {static_cast<std::int32_t>(u), 2, false};
}

inline std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void write_u16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v & 0xFF);
  p[1] = static_cast<std::uint8_t>(v >> 8);
}

/// Length in bytes of the bytecode word starting at `p` (for walkers and
/// disassemblers); `available` bounds the read of length fields.
std::size_t word_length(const std::uint8_t* p, std::size_t available);

}  // namespace rexa
