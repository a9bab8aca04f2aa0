#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rexa/cell.hpp"

namespace rexa {

/// Fixed-capacity cell stack. Violations throw VmFault(stack).
class Stack {
 public:
  explicit Stack(std::size_t capacity = 0) : cells_(capacity) {}

  void push(Cell v);
  Cell pop();
  void push2(DoubleCell d) {
    push(d.msw);
    push(d.lsw);
  }
  void push2(std::int32_t v) { push2(DoubleCell::from(v)); }
  DoubleCell pop2();

  /// i-th cell from the top (0 = top).
  Cell peek(std::size_t i = 0) const;
  Cell& at_top(std::size_t i = 0);
  void require(std::size_t n) const;
  void require_room(std::size_t n) const;

  std::size_t top() const { return top_; }
  std::size_t capacity() const { return cells_.size(); }
  bool empty() const { return top_ == 0; }
  void clear() { top_ = 0; }
  /// Realigns the top to a previously observed depth.
  void set_top(std::size_t t);

  std::span<const Cell> contents() const { return {cells_.data(), top_}; }
  std::span<Cell> storage() { return cells_; }

 private:
  std::vector<Cell> cells_;
  std::size_t top_ = 0;
};

enum class FrameState : std::uint8_t { source, compiled };

struct CodeFrame {
  std::uint16_t id = 0;
  std::uint32_t start = 0;
  std::uint32_t length = 0;
  FrameState state = FrameState::source;
  bool persistent = false;
  bool locked = false;
  std::uint16_t live_tasks = 0;

  std::uint32_t end() const { return start + length; }
  bool contains(std::uint32_t addr) const { return addr >= start && addr < end(); }
};

/// Byte-addressed program store partitioned into contiguous frames.
/// Allocation is first fit over the gaps between frames.
class CodeSegment {
 public:
  /// Bytes past the segment end readable by the decoder without bounds checks.
  static constexpr std::size_t kGuardBytes = 8;

  explicit CodeSegment(std::size_t size);

  std::size_t size() const { return size_; }
  std::uint8_t* data() { return bytes_.data(); }
  const std::uint8_t* data() const { return bytes_.data(); }
  std::span<std::uint8_t> bytes() { return {bytes_.data(), size_}; }
  std::span<const std::uint8_t> bytes() const { return {bytes_.data(), size_}; }

  CodeFrame& alloc(std::size_t len);
  /// Throws FrameLocked for locked/persistent frames or frames with live tasks.
  void free(std::uint16_t id);
  /// Grows in place (if the following gap allows) or shrinks the frame.
  void resize(std::uint16_t id, std::size_t len);

  CodeFrame* find(std::uint16_t id);
  const CodeFrame* find(std::uint16_t id) const;
  const CodeFrame* frame_at(std::uint32_t addr) const;
  const std::vector<CodeFrame>& frames() const { return frames_; }

  std::size_t used_bytes() const;
  std::size_t free_bytes() const { return size_ - used_bytes(); }
  std::size_t largest_free() const;

  /// Replaces the whole state (checkpoint restore).
  void assign(std::span<const std::uint8_t> bytes, std::vector<CodeFrame> frames, std::uint16_t next_id);
  std::uint16_t next_id() const { return next_id_; }

 private:
  std::size_t size_;
  std::vector<std::uint8_t> bytes_;
  std::vector<CodeFrame> frames_;  // sorted by start
  std::uint16_t next_id_ = 1;
};

/// Global word dictionary: hashed buckets with chained entries. The newest
/// binding of a name wins; removing a frame's entries reveals older ones.
class Dictionary {
 public:
  struct Entry {
    std::string name;
    std::uint16_t frame = 0;
    std::uint16_t address = 0;
  };

  explicit Dictionary(std::size_t capacity = 256, std::size_t buckets = 64);

  /// Throws rexa::Error("dictionary full") when at capacity.
  void define(std::string_view name, std::uint16_t frame, std::uint16_t address);
  std::optional<std::uint16_t> lookup(std::string_view name) const;
  const Entry* find(std::string_view name) const;
  void remove_frame(std::uint16_t frame);

  std::size_t size() const { return count_; }
  std::size_t capacity() const { return capacity_; }
  /// All entries, oldest first (checkpointing and listing).
  std::vector<Entry> entries() const;
  void clear();

 private:
  std::size_t bucket_of(std::string_view name) const;

  std::size_t capacity_;
  std::vector<std::vector<Entry>> buckets_;  // newest last within each chain
  std::size_t count_ = 0;
  std::uint64_t seq_ = 0;
  std::vector<std::vector<std::uint64_t>> seqs_;  // insertion sequence, parallel to buckets_
};

}  // namespace rexa
