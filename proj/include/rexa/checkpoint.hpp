#pragma once

// Checkpoint container: "RXCP", version byte, u16 section count, then a
// section table of (u16 id, u32 offset, u32 length, u32 crc32) entries
// followed by the section payloads. All integers little-endian.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rexa {

inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class Section : std::uint16_t {
  config = 1,
  code = 2,
  frames = 3,
  dictionary = 4,
  tasks = 5,
  registers = 6,
  handlers = 7,
  profile = 8,
  host = 9,
};

class Checkpoint {
 public:
  void add(Section id, std::vector<std::uint8_t> bytes) { sections_[static_cast<std::uint16_t>(id)] = std::move(bytes); }
  bool has(Section id) const { return sections_.contains(static_cast<std::uint16_t>(id)); }
  /// Throws CheckpointError when missing.
  const std::vector<std::uint8_t>& section(Section id) const;

  std::vector<std::uint8_t> encode() const;
  /// Validates magic, version, bounds and every section CRC.
  static Checkpoint decode(std::span<const std::uint8_t> blob);

 private:
  std::map<std::uint16_t, std::vector<std::uint8_t>> sections_;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

/// Little-endian serialization helpers shared by checkpoint and wire code.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    u16(static_cast<std::uint16_t>(v));
    u16(static_cast<std::uint16_t>(v >> 16));
  }
  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }
  void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v);
  void str(std::string_view s);
  void bytes(std::span<const std::uint8_t> b);  // u32 length prefix
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

  std::vector<std::uint8_t>& data() { return out_; }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

/// Reads fail with CheckpointError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64();
  std::string str();
  std::vector<std::uint8_t> bytes();
  std::span<const std::uint8_t> raw(std::size_t n);
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace rexa
