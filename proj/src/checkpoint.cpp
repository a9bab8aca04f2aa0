#include "rexa/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>

#include "rexa/error.hpp"
#include "rexa/vm.hpp"

namespace rexa {

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large inputs in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    c = crc32(c, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(c);
}

// ---------------------------------------------------------------------------
// Byte helpers

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  out_.insert(out_.end(), s.begin(), s.end());
}

void ByteWriter::bytes(std::span<const std::uint8_t> b) {
  u32(static_cast<std::uint32_t>(b.size()));
  raw(b);
}

void ByteReader::need(std::size_t n) const {
  if (in_.size() - pos_ < n) throw CheckpointError("truncated data");
}

std::uint8_t ByteReader::u8() {
  need(1);
  return in_[pos_++];
}

std::uint16_t ByteReader::u16() {
  const std::uint16_t lo = u8();
  return static_cast<std::uint16_t>(lo | (u8() << 8));
}

std::uint32_t ByteReader::u32() {
  const std::uint32_t lo = u16();
  return lo | (static_cast<std::uint32_t>(u16()) << 16);
}

std::uint64_t ByteReader::u64() {
  const std::uint64_t lo = u32();
  return lo | (static_cast<std::uint64_t>(u32()) << 32);
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str() {
  const auto n = u32();
  const auto r = raw(n);
  return std::string(r.begin(), r.end());
}

std::vector<std::uint8_t> ByteReader::bytes() {
  const auto n = u32();
  const auto r = raw(n);
  return {r.begin(), r.end()};
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  auto r = in_.subspan(pos_, n);
  pos_ += n;
  return r;
}

// ---------------------------------------------------------------------------
// Container

const std::vector<std::uint8_t>& Checkpoint::section(Section id) const {
  const auto it = sections_.find(static_cast<std::uint16_t>(id));
  if (it == sections_.end())
    throw CheckpointError("checkpoint lacks section " + std::to_string(static_cast<int>(id)));
  return it->second;
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("RXCP"), 4));
  w.u8(kCheckpointVersion);
  w.u16(static_cast<std::uint16_t>(sections_.size()));
  std::uint32_t offset = static_cast<std::uint32_t>(4 + 1 + 2 + sections_.size() * 14);
  for (const auto& [id, bytes] : sections_) {
    w.u16(id);
    w.u32(offset);
    w.u32(static_cast<std::uint32_t>(bytes.size()));
    w.u32(crc32_of(bytes));
    offset += static_cast<std::uint32_t>(bytes.size());
  }
  for (const auto& [id, bytes] : sections_) w.raw(bytes);
  return w.take();
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> blob) {
  if (blob.size() < 7 || std::memcmp(blob.data(), "RXCP", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  ByteReader r(blob.subspan(4));
  const auto version = r.u8();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u16();
  Checkpoint cp;
  for (std::uint16_t i = 0; i < count; ++i) {
    const auto id = r.u16();
    const auto off = r.u32();
    const auto len = r.u32();
    const auto crc = r.u32();
    if (off > blob.size() || len > blob.size() - off) throw CheckpointError("truncated checkpoint section");
    const auto body = blob.subspan(off, len);
    if (crc32_of(body) != crc) throw CheckpointError("checkpoint section " + std::to_string(id) + " CRC mismatch");
    cp.sections_[id] = {body.begin(), body.end()};
  }
  return cp;
}

// ---------------------------------------------------------------------------
// Vm state

struct VmSerializer {
  static std::uint32_t isa_fingerprint(const isa::Isa& isa) {
    ByteWriter w;
    for (const auto& word : isa.words()) {
      w.str(word.name);
      w.str(word.tag);
    }
    return crc32_of(w.data());
  }

  static void put_stack(ByteWriter& w, const Stack& s) {
    w.u32(static_cast<std::uint32_t>(s.top()));
    for (Cell c : s.contents()) w.i16(c);
  }

  static void get_stack(ByteReader& r, Stack& s) {
    const auto n = r.u32();
    if (n > s.capacity()) throw CheckpointError("stack contents exceed the configured size");
    s.clear();
    for (std::uint32_t i = 0; i < n; ++i) s.push(r.i16());
  }

  static std::vector<std::uint8_t> save(const Vm& vm) {
    Checkpoint cp;
    const VmConfig& c = vm.cfg_;
    {
      ByteWriter w;
      w.u32(static_cast<std::uint32_t>(c.cs_size));
      w.u32(static_cast<std::uint32_t>(c.ds_size));
      w.u32(static_cast<std::uint32_t>(c.rs_size));
      w.u32(static_cast<std::uint32_t>(c.fs_size));
      w.u32(static_cast<std::uint32_t>(c.max_tasks));
      w.u8(c.merge_fs);
      w.u32(isa_fingerprint(*vm.isa_));
      w.u32(static_cast<std::uint32_t>(vm.ios_.fios_count()));
      w.u32(static_cast<std::uint32_t>(vm.ios_.dios_count()));
      cp.add(Section::config, w.take());
    }
    cp.add(Section::code, {vm.cs_.bytes().begin(), vm.cs_.bytes().end()});
    {
      ByteWriter w;
      w.u16(vm.cs_.next_id());
      w.u32(static_cast<std::uint32_t>(vm.cs_.frames().size()));
      for (const auto& f : vm.cs_.frames()) {
        w.u16(f.id);
        w.u32(f.start);
        w.u32(f.length);
        w.u8(static_cast<std::uint8_t>(f.state));
        w.u8(f.persistent);
        w.u8(f.locked);
        w.u16(f.live_tasks);
      }
      cp.add(Section::frames, w.take());
    }
    {
      ByteWriter w;
      const auto entries = vm.dict_.entries();
      w.u32(static_cast<std::uint32_t>(entries.size()));
      for (const auto& e : entries) {
        w.str(e.name);
        w.u16(e.frame);
        w.u16(e.address);
      }
      cp.add(Section::dictionary, w.take());
    }
    {
      ByteWriter w;
      w.u32(static_cast<std::uint32_t>(vm.tasks_.size()));
      for (const Task& t : vm.tasks_) {
        w.u8(static_cast<std::uint8_t>(t.state));
        w.i32(t.pc);
        w.u16(t.frame);
        w.i32(t.priority);
        w.u64(t.arrival);
        w.u64(t.deadline);
        w.u8(t.deadline_signalled);
        w.u8(static_cast<std::uint8_t>(t.wait));
        w.u64(t.timeout);
        w.u8(t.guard.has_value());
        w.i16(t.guard ? t.guard->handle : 0);
        w.i16(t.guard ? t.guard->value : 0);
        w.u8(t.catch_point.set);
        w.u16(t.catch_point.pc);
        w.u16(t.catch_point.ds);
        w.u16(t.catch_point.rs);
        w.u16(t.catch_point.fs);
        w.i16(t.pending);
        w.u8(t.in_handler);
        w.u8(t.resumable);
        w.i16(t.handler_code);
        w.u8(t.preempted);
        w.i16(t.error);
        w.u64(t.steps);
        if (t.state == TaskState::free) continue;
        put_stack(w, t.ds);
        put_stack(w, t.rs);
        put_stack(w, t.fs);
        w.u32(static_cast<std::uint32_t>(t.calls.size()));
        for (const auto& rec : t.calls) {
          w.u16(rec.word);
          w.u16(rec.rs_depth);
          w.u64(rec.steps_at_entry);
        }
      }
      cp.add(Section::tasks, w.take());
    }
    {
      ByteWriter w;
      w.u64(vm.clock_ns_);
      w.u64(vm.total_steps_);
      w.u64(vm.exec_count_);
      w.u64(vm.arrival_seq_);
      w.u16(vm.ready_from_);
      cp.add(Section::registers, w.take());
    }
    {
      ByteWriter w;
      w.u32(static_cast<std::uint32_t>(vm.handlers_.size()));
      for (const auto& [code, f] : vm.handlers_) {
        w.i16(code);
        w.i16(f);
      }
      cp.add(Section::handlers, w.take());
    }
    {
      ByteWriter w;
      w.u32(static_cast<std::uint32_t>(vm.profile_.words().size()));
      for (const auto& [k, s] : vm.profile_.words()) {
        w.u32(k);
        w.u64(s.calls);
        w.u64(s.steps);
      }
      w.u32(static_cast<std::uint32_t>(vm.profile_.tasks().size()));
      for (const auto& [k, s] : vm.profile_.tasks()) {
        w.u32(k);
        w.u64(s.slices);
        w.u64(s.steps);
        w.u64(s.suspensions);
      }
      cp.add(Section::profile, w.take());
    }
    cp.add(Section::host, vm.hooks_ ? vm.hooks_->save_host() : std::vector<std::uint8_t>{});
    return cp.encode();
  }

  static void restore(Vm& vm, std::span<const std::uint8_t> blob) {
    const Checkpoint cp = Checkpoint::decode(blob);
    const VmConfig& c = vm.cfg_;
    {
      ByteReader r(cp.section(Section::config));
      const bool same = r.u32() == c.cs_size && r.u32() == c.ds_size && r.u32() == c.rs_size &&
                        r.u32() == c.fs_size && r.u32() == c.max_tasks && (r.u8() != 0) == c.merge_fs;
      if (!same) throw CheckpointError("checkpoint was taken with a different VM configuration");
      if (r.u32() != isa_fingerprint(*vm.isa_)) throw CheckpointError("checkpoint was taken with a different word set");
      if (r.u32() != vm.ios_.fios_count() || r.u32() != vm.ios_.dios_count())
        throw CheckpointError("checkpoint was taken with a different IOS table");
    }
    // Decode everything before touching the VM so a bad blob leaves it intact.
    const auto& code = cp.section(Section::code);
    if (code.size() != c.cs_size) throw CheckpointError("code segment size mismatch");

    std::vector<CodeFrame> frames;
    std::uint16_t next_id = 0;
    {
      ByteReader r(cp.section(Section::frames));
      next_id = r.u16();
      const auto n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        CodeFrame f;
        f.id = r.u16();
        f.start = r.u32();
        f.length = r.u32();
        f.state = static_cast<FrameState>(r.u8());
        f.persistent = r.u8() != 0;
        f.locked = r.u8() != 0;
        f.live_tasks = r.u16();
        if (f.start + f.length > c.cs_size) throw CheckpointError("frame outside the code segment");
        frames.push_back(f);
      }
    }
    std::vector<Dictionary::Entry> dict;
    {
      ByteReader r(cp.section(Section::dictionary));
      const auto n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        Dictionary::Entry e;
        e.name = r.str();
        e.frame = r.u16();
        e.address = r.u16();
        dict.push_back(std::move(e));
      }
    }
    std::vector<Task> tasks(vm.tasks_.size());
    {
      ByteReader r(cp.section(Section::tasks));
      if (r.u32() != tasks.size()) throw CheckpointError("task table size mismatch");
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        Task& t = tasks[i];
        t.id = static_cast<int>(i);
        t.state = static_cast<TaskState>(r.u8());
        t.pc = r.i32();
        t.frame = r.u16();
        t.priority = r.i32();
        t.arrival = r.u64();
        t.deadline = r.u64();
        t.deadline_signalled = r.u8() != 0;
        t.wait = static_cast<WaitKind>(r.u8());
        t.timeout = r.u64();
        const bool has_guard = r.u8() != 0;
        const Cell gh = r.i16();
        const Cell gv = r.i16();
        if (has_guard) t.guard = Guard{gh, gv};
        t.catch_point.set = r.u8() != 0;
        t.catch_point.pc = r.u16();
        t.catch_point.ds = r.u16();
        t.catch_point.rs = r.u16();
        t.catch_point.fs = r.u16();
        t.pending = r.i16();
        t.in_handler = r.u8() != 0;
        t.resumable = r.u8() != 0;
        t.handler_code = r.i16();
        t.preempted = r.u8() != 0;
        t.error = r.i16();
        t.steps = r.u64();
        if (t.state == TaskState::free) continue;
        t.ds = Stack(c.ds_size);
        t.rs = Stack(c.rs_size);
        t.fs = Stack(c.merge_fs ? 0 : c.fs_size);
        try {
          get_stack(r, t.ds);
          get_stack(r, t.rs);
          get_stack(r, t.fs);
        } catch (const VmFault&) {
          throw CheckpointError("corrupt stack section");
        }
        const auto calls = r.u32();
        for (std::uint32_t k = 0; k < calls; ++k) {
          Task::CallRecord rec{};
          rec.word = r.u16();
          rec.rs_depth = r.u16();
          rec.steps_at_entry = r.u64();
          t.calls.push_back(rec);
        }
      }
    }
    ByteReader regs(cp.section(Section::registers));
    const auto clock_ns = regs.u64();
    const auto total_steps = regs.u64();
    const auto exec_count = regs.u64();
    const auto arrival_seq = regs.u64();
    const auto ready_from = regs.u16();
    std::map<std::int16_t, Cell> handlers;
    {
      ByteReader r(cp.section(Section::handlers));
      const auto n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        const auto code = r.i16();
        handlers[code] = r.i16();
      }
    }
    Profile prof;
    {
      ByteReader r(cp.section(Section::profile));
      auto n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        auto& s = prof.words()[r.u32()];
        s.calls = r.u64();
        s.steps = r.u64();
      }
      n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        auto& s = prof.tasks()[r.u32()];
        s.slices = r.u64();
        s.steps = r.u64();
        s.suspensions = r.u64();
      }
    }

    vm.cs_.assign(code, std::move(frames), next_id);
    vm.dict_.clear();
    for (const auto& e : dict) vm.dict_.define(e.name, e.frame, e.address);
    vm.tasks_ = std::move(tasks);
    vm.clock_ns_ = clock_ns;
    vm.total_steps_ = total_steps;
    vm.exec_count_ = exec_count;
    vm.arrival_seq_ = arrival_seq;
    vm.ready_from_ = ready_from;
    vm.handlers_ = std::move(handlers);
    vm.profile_ = std::move(prof);
    vm.cur_ = nullptr;
    vm.stop_ = false;
    vm.nested_ = 0;
    if (vm.hooks_) vm.hooks_->restore_host(cp.section(Section::host));
  }
};

std::vector<std::uint8_t> Vm::save() const { return VmSerializer::save(*this); }

void Vm::restore(std::span<const std::uint8_t> blob) { VmSerializer::restore(*this, blob); }

}  // namespace rexa
