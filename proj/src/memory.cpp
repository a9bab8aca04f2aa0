#include "rexa/memory.hpp"

#include <algorithm>
#include <cstring>
#include <map>

#include "rexa/error.hpp"

namespace rexa {

// ---------------------------------------------------------------------------
// Stack

void Stack::push(Cell v) {
  if (top_ >= cells_.size()) throw VmFault(ExceptionCode::stack);
  cells_[top_++] = v;
}

Cell Stack::pop() {
  if (top_ == 0) throw VmFault(ExceptionCode::stack);
  return cells_[--top_];
}

DoubleCell Stack::pop2() {
  if (top_ < 2) throw VmFault(ExceptionCode::stack);
  DoubleCell d;
  d.lsw = cells_[--top_];
  d.msw = cells_[--top_];
  return d;
}

Cell Stack::peek(std::size_t i) const {
  if (i >= top_) throw VmFault(ExceptionCode::stack);
  return cells_[top_ - 1 - i];
}

Cell& Stack::at_top(std::size_t i) {
  if (i >= top_) throw VmFault(ExceptionCode::stack);
  return cells_[top_ - 1 - i];
}

void Stack::require(std::size_t n) const {
  if (top_ < n) throw VmFault(ExceptionCode::stack);
}

void Stack::require_room(std::size_t n) const {
  if (cells_.size() - top_ < n) throw VmFault(ExceptionCode::stack);
}

void Stack::set_top(std::size_t t) {
  if (t > cells_.size()) throw VmFault(ExceptionCode::stack);
  top_ = t;
}

// ---------------------------------------------------------------------------
// CodeSegment

CodeSegment::CodeSegment(std::size_t size) : size_(size), bytes_(size + kGuardBytes, 0) {
  if (size == 0 || size > 0x8000) throw ConfigError("code segment size must be in 1..32768 bytes");
}

CodeFrame& CodeSegment::alloc(std::size_t len) {
  if (len == 0) len = 1;
  std::size_t cursor = 0;
  std::size_t pos = 0;
  for (; pos < frames_.size(); ++pos) {
    if (frames_[pos].start - cursor >= len) break;
    cursor = frames_[pos].end();
  }
  if (pos == frames_.size() && size_ - cursor < len)
    throw CsExhausted("code segment exhausted: need " + std::to_string(len) + " bytes, largest gap " +
                      std::to_string(largest_free()));
  CodeFrame f;
  f.id = next_id_++;
  if (next_id_ == 0) next_id_ = 1;
  f.start = static_cast<std::uint32_t>(cursor);
  f.length = static_cast<std::uint32_t>(len);
  std::memset(bytes_.data() + cursor, 0, len);
  return *frames_.insert(frames_.begin() + static_cast<std::ptrdiff_t>(pos), f);
}

void CodeSegment::free(std::uint16_t id) {
  auto it = std::find_if(frames_.begin(), frames_.end(), [id](const CodeFrame& f) { return f.id == id; });
  if (it == frames_.end()) throw Error("no such code frame: " + std::to_string(id));
  if (it->locked) throw FrameLocked("code frame " + std::to_string(id) + " is locked (exported words)");
  if (it->persistent) throw FrameLocked("code frame " + std::to_string(id) + " is persistent");
  if (it->live_tasks) throw FrameLocked("code frame " + std::to_string(id) + " has live tasks");
  std::memset(bytes_.data() + it->start, 0, it->length);
  frames_.erase(it);
}

void CodeSegment::resize(std::uint16_t id, std::size_t len) {
  auto it = std::find_if(frames_.begin(), frames_.end(), [id](const CodeFrame& f) { return f.id == id; });
  if (it == frames_.end()) throw Error("no such code frame: " + std::to_string(id));
  if (len == 0) len = 1;
  const std::size_t limit = (it + 1 == frames_.end()) ? size_ : (it + 1)->start;
  if (it->start + len > limit)
    throw CsExhausted("code segment exhausted: frame " + std::to_string(id) + " cannot grow to " +
                      std::to_string(len) + " bytes");
  if (len > it->length) std::memset(bytes_.data() + it->end(), 0, len - it->length);
  else std::memset(bytes_.data() + it->start + len, 0, it->length - len);
  it->length = static_cast<std::uint32_t>(len);
}

CodeFrame* CodeSegment::find(std::uint16_t id) {
  for (auto& f : frames_)
    if (f.id == id) return &f;
  return nullptr;
}

const CodeFrame* CodeSegment::find(std::uint16_t id) const {
  for (const auto& f : frames_)
    if (f.id == id) return &f;
  return nullptr;
}

const CodeFrame* CodeSegment::frame_at(std::uint32_t addr) const {
  for (const auto& f : frames_)
    if (f.contains(addr)) return &f;
  return nullptr;
}

std::size_t CodeSegment::used_bytes() const {
  std::size_t n = 0;
  for (const auto& f : frames_) n += f.length;
  return n;
}

std::size_t CodeSegment::largest_free() const {
  std::size_t best = 0, cursor = 0;
  for (const auto& f : frames_) {
    best = std::max<std::size_t>(best, f.start - cursor);
    cursor = f.end();
  }
  return std::max(best, size_ - cursor);
}

void CodeSegment::assign(std::span<const std::uint8_t> bytes, std::vector<CodeFrame> frames, std::uint16_t next_id) {
  if (bytes.size() != size_) throw CheckpointError("code segment size mismatch");
  std::sort(frames.begin(), frames.end(), [](const CodeFrame& a, const CodeFrame& b) { return a.start < b.start; });
  std::uint32_t cursor = 0;
  for (const auto& f : frames) {
    if (f.start < cursor || f.end() > size_) throw CheckpointError("overlapping or out-of-range code frames");
    cursor = f.end();
  }
  std::copy(bytes.begin(), bytes.end(), bytes_.begin());
  frames_ = std::move(frames);
  next_id_ = next_id;
}

// ---------------------------------------------------------------------------
// Dictionary

Dictionary::Dictionary(std::size_t capacity, std::size_t buckets)
    : capacity_(capacity), buckets_(std::max<std::size_t>(1, buckets)), seqs_(buckets_.size()) {}

std::size_t Dictionary::bucket_of(std::string_view name) const {
  std::uint32_t h = 2166136261u;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 16777619u;
  }
  return h % buckets_.size();
}

void Dictionary::define(std::string_view name, std::uint16_t frame, std::uint16_t address) {
  if (count_ >= capacity_) throw Error("dictionary full");
  const auto b = bucket_of(name);
  buckets_[b].push_back({std::string(name), frame, address});
  seqs_[b].push_back(seq_++);
  ++count_;
}

const Dictionary::Entry* Dictionary::find(std::string_view name) const {
  const auto& chain = buckets_[bucket_of(name)];
  for (auto it = chain.rbegin(); it != chain.rend(); ++it)
    if (it->name == name) return &*it;
  return nullptr;
}

std::optional<std::uint16_t> Dictionary::lookup(std::string_view name) const {
  if (const auto* e = find(name)) return e->address;
  return std::nullopt;
}

void Dictionary::remove_frame(std::uint16_t frame) {
  for (std::size_t b = 0; b < buckets_.size(); ++b) {
    auto& chain = buckets_[b];
    auto& seq = seqs_[b];
    for (std::size_t i = chain.size(); i-- > 0;) {
      if (chain[i].frame == frame) {
        chain.erase(chain.begin() + static_cast<std::ptrdiff_t>(i));
        seq.erase(seq.begin() + static_cast<std::ptrdiff_t>(i));
        --count_;
      }
    }
  }
}

std::vector<Dictionary::Entry> Dictionary::entries() const {
  std::map<std::uint64_t, const Entry*> ordered;
  for (std::size_t b = 0; b < buckets_.size(); ++b)
    for (std::size_t i = 0; i < buckets_[b].size(); ++i) ordered.emplace(seqs_[b][i], &buckets_[b][i]);
  std::vector<Entry> out;
  out.reserve(ordered.size());
  for (const auto& [s, e] : ordered) out.push_back(*e);
  return out;
}

void Dictionary::clear() {
  for (auto& c : buckets_) c.clear();
  for (auto& s : seqs_) s.clear();
  count_ = 0;
}

}  // namespace rexa
