#include "rexa/bytecode.hpp"

#include <string>

#include "rexa/error.hpp"

namespace rexa {

EncodedWord encode_double_literal(std::int32_t v) {
  if (!fits_double(v)) throw Error("literal out of 30-bit range: " + std::to_string(v));
  const auto u = static_cast<std::uint32_t>(v) & 0x3FFFFFFFu;
  EncodedWord w;
  w.bytes = {static_cast<std::uint8_t>(op::kDoubleTag | (u >> 24)), static_cast<std::uint8_t>((u >> 16) & 0xFF),
             static_cast<std::uint8_t>((u >> 8) & 0xFF), static_cast<std::uint8_t>(u & 0xFF)};
  w.length = 4;
  return w;
}

EncodedWord encode_literal(std::int32_t v) {
  if (!fits_short(v)) return encode_double_literal(v);
  const auto u = static_cast<std::uint32_t>(v) & 0x3FFFu;
  EncodedWord w;
  w.bytes[0] = static_cast<std::uint8_t>(op::kShortTag | (u >> 8));
  w.bytes[1] = static_cast<std::uint8_t>(u & 0xFF);
  w.length = 2;
  return w;
}

std::size_t word_length(const std::uint8_t* p, std::size_t available) {
  if (available == 0) return 0;
  const std::uint8_t b = p[0];
  if (b >= op::kDoubleTag) return 4;
  if (b >= op::kShortTag) return 2;
  switch (b) {
    case op::kBranch:
    case op::kZeroBranch:
    case op::kCall:
    case op::kIos:
    case op::kAddr:
    case op::kLit:
    case op::kVar:
    case op::kLoop:
    case op::kPlusLoop:
      return 3;
    case op::kStr:
      return available < 2 ? 2 : 2 + static_cast<std::size_t>(p[1]);
    case op::kArray:
      return available < 3 ? 3 : 3 + 2 * static_cast<std::size_t>(read_u16(p + 1));
    default:
      return 1;
  }
}

}  // namespace rexa
