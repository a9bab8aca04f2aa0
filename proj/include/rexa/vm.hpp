#pragma once

// The virtual machine: code segment, tasks with their stacks, the bytecode
// dispatch loop, exceptions and the mask-based task scheduler.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rexa/cell.hpp"
#include "rexa/compiler.hpp"
#include "rexa/ios.hpp"
#include "rexa/isa.hpp"
#include "rexa/memory.hpp"
#include "rexa/scheduler.hpp"

namespace rexa {

enum class ClockMode : std::uint8_t { simulated, wall };

struct VmConfig {
  std::size_t cs_size = 1024;
  std::size_t ds_size = 256;
  std::size_t rs_size = 128;
  std::size_t fs_size = 64;
  std::size_t max_tasks = 8;
  std::size_t dict_capacity = 256;
  bool merge_fs = false;  // loop counters live on the return stack
  std::uint32_t steps = 64;
  std::uint64_t longest_us = 1000;
  isa::LookupMode lookup = isa::LookupMode::pht;
  ClockMode clock = ClockMode::simulated;
  double t1_ns = 1000.0;  // simulated time per instruction
  bool preempt = false;   // deliver `interrupt` to tasks cut by the time budget
  bool persistent_frames = false;
  bool profile = true;
};

enum class TaskState : std::uint8_t { free, ready, waiting_time, waiting_event, running, finished };

/// Why a suspended task waits. Host I/O waits re-execute the suspending
/// instruction on wake-up (its operands stay on the stack until it succeeds).
enum class WaitKind : std::uint8_t { none, yield, sleep, await, input, receive, send, sendn };

struct Guard {
  Cell handle = 0;  // CS variable address (>= 0) or DIOS handle (< 0)
  Cell value = 0;
};

struct CatchPoint {
  bool set = false;
  std::uint16_t pc = 0;
  std::uint16_t ds = 0;
  std::uint16_t rs = 0;
  std::uint16_t fs = 0;
};

struct Task {
  int id = -1;
  TaskState state = TaskState::free;
  /// >= 0: next instruction; < 0: suspended, resume address is ~pc.
  std::int32_t pc = 0;
  Stack ds, rs, fs;
  std::uint16_t frame = 0;
  int priority = 0;
  std::uint64_t arrival = 0;   // µs
  std::uint64_t deadline = 0;  // absolute µs, 0 = none
  bool deadline_signalled = false;
  WaitKind wait = WaitKind::none;
  std::uint64_t timeout = 0;  // absolute µs for sleep/await
  std::optional<Guard> guard;
  CatchPoint catch_point;
  std::int16_t pending = 0;  // exception code awaiting `catch`
  bool in_handler = false;
  bool resumable = false;  // current exception was raised at a scheduling point
  std::int16_t handler_code = 0;
  bool preempted = false;
  std::int16_t error = 0;  // exception that terminated the task
  std::uint64_t steps = 0;

  struct CallRecord {
    std::uint16_t word;
    std::uint16_t rs_depth;
    std::uint64_t steps_at_entry;
  };
  std::vector<CallRecord> calls;

  bool live() const { return state != TaskState::free && state != TaskState::finished; }
  bool suspended() const { return pc < 0; }
  std::uint16_t resume_pc() const { return static_cast<std::uint16_t>(pc < 0 ? ~pc : pc); }
  bool event_task() const { return priority < 0; }
};

/// Host side of communication and stream words.
class HostPort {
 public:
  virtual ~HostPort() = default;
  /// Returns false when the link is full (the task suspends and retries).
  virtual bool link_send(Cell /*dst*/, std::span<const Cell> /*values*/) { return false; }
  virtual bool link_can_send(Cell /*dst*/, std::size_t /*n*/) const { return false; }
  virtual std::optional<Cell> link_receive(Cell /*src*/) { return std::nullopt; }
  virtual bool link_can_receive(Cell /*src*/) const { return false; }
  virtual std::optional<Cell> input() { return std::nullopt; }
  virtual bool input_ready() const { return false; }
};

struct SliceInfo {
  int task = -1;  // -1: nothing was runnable
  WakeReason reason = WakeReason::none;
  std::uint64_t start_us = 0;
  std::uint32_t steps = 0;
  bool suspended = false;
  bool finished = false;
  bool preempted = false;
  std::int16_t error = 0;
};

/// Called around every slice; devices advance and guarded flags change here.
class SliceHooks {
 public:
  virtual ~SliceHooks() = default;
  virtual void before_slice(class Vm&) {}
  virtual void after_slice(class Vm&, const SliceInfo&) {}
  /// Earliest future time at which the host will change state by itself.
  virtual std::optional<std::uint64_t> next_event_us(const class Vm&) const { return std::nullopt; }
  /// Host state included in checkpoints.
  virtual std::vector<std::uint8_t> save_host() const { return {}; }
  virtual void restore_host(std::span<const std::uint8_t>) {}
};

enum class RunStatus : std::uint8_t { done, blocked, budget };

struct RunOutcome {
  RunStatus status = RunStatus::done;
  std::size_t slices = 0;
  std::uint64_t steps = 0;
  std::int16_t error = 0;  // first uncaught exception seen
  int error_task = -1;
};

using OutputFn = std::function<void(std::uint8_t channel, std::string_view text)>;

class Vm {
 public:
  explicit Vm(VmConfig cfg = {}, const isa::Isa& isa = isa::Isa::default_isa());
  Vm(const Vm&) = delete;
  Vm& operator=(const Vm&) = delete;

  const VmConfig& config() const { return cfg_; }
  const isa::Isa& isa() const { return *isa_; }
  CodeSegment& cs() { return cs_; }
  const CodeSegment& cs() const { return cs_; }
  Dictionary& dict() { return dict_; }
  const Dictionary& dict() const { return dict_; }
  IosTable& ios() { return ios_; }
  const IosTable& ios() const { return ios_; }
  Profile& profile() { return profile_; }
  const Profile& profile() const { return profile_; }

  void set_output(OutputFn fn) { output_ = std::move(fn); }
  void set_host(HostPort* host) { host_ = host; }
  void set_hooks(SliceHooks* hooks) { hooks_ = hooks; }
  HostPort* host() const { return host_; }
  SliceHooks* hooks() const { return hooks_; }

  /// Copies `source` into a new frame and compiles it in place. On failure
  /// the frame is released and the CompileError rethrown.
  CompileResult compile(std::string_view source, CompileObserver* observer = nullptr);
  /// Releases a frame that has no live tasks (dictionary entries and
  /// exception handlers bound into it go with it).
  void free_frame(std::uint16_t frame);

  /// Starts the frame's top-level code as a new task. Throws Error when the
  /// task table is full.
  int spawn(std::uint16_t frame, int priority = 0, std::uint64_t relative_deadline_us = 0);
  /// Starts a user word (funcref >= 0) as a task attached to `frame`.
  int spawn_word(Cell funcref, std::uint16_t frame, int priority = 0, std::uint64_t relative_deadline_us = 0);

  SliceInfo slice();
  /// Runs slices until no task is live, nothing can make progress, or the
  /// budget is spent. Idle time is skipped on the simulated clock.
  RunOutcome run(std::size_t max_slices = std::numeric_limits<std::size_t>::max());
  /// Like run(), but stops as soon as no task of `frame` is live.
  RunOutcome run_frame(std::uint16_t frame, std::size_t max_slices = std::numeric_limits<std::size_t>::max());

  /// Earliest time a waiting task or the host will change state by itself.
  std::optional<std::uint64_t> next_wakeup() const;

  std::uint64_t now_us() const;
  void advance_clock(std::uint64_t us);
  void set_clock(std::uint64_t us);

  const std::vector<Task>& tasks() const { return tasks_; }
  const Task* task(int id) const;
  std::size_t live_tasks() const;
  std::size_t live_tasks(std::uint16_t frame) const;
  /// Mask as the scheduler sees it right now.
  TaskMask mask() const;
  const std::map<std::int16_t, Cell>& handlers() const { return handlers_; }

  /// Output words route here; the channel byte multiplexes `.`-style console
  /// text (0) and the `out` data stream (1).
  void emit_output(std::uint8_t channel, std::string_view text);

  /// Cell array access by program handle (embedded array or DIOS entry).
  std::vector<Cell> array_get(Cell handle) const;
  void array_set(Cell handle, std::span<const Cell> values);
  std::size_t array_length(Cell handle) const;
  Cell cell_get(Cell handle) const;
  void cell_set(Cell handle, Cell v);

  /// Applies a function reference to one value (used by vecmap). User words
  /// run to completion in a nested interpreter loop on the current task.
  Cell apply(Cell funcref, Cell x);

  /// Executes up to `steps` instructions of task `id`.
  SliceInfo vmloop(int id, std::uint32_t steps, std::uint64_t longest_us);

  std::uint64_t total_steps() const { return total_steps_; }
  /// True while an instruction loop is executing (host callbacks see this).
  bool in_slice() const { return cur_ != nullptr; }

  /// Drops all volatile state (code, dictionary, tasks, handlers, clock,
  /// profile) as after a power loss. IOS registrations survive.
  void reset();

  /// Checkpointing; see checkpoint.hpp for the container format.
  std::vector<std::uint8_t> save() const;
  void restore(std::span<const std::uint8_t> blob);

 private:
  friend struct VmOps;
  friend struct VmSerializer;
  using OpFn = void (*)(Vm&, Task&);

  void build_dispatch();
  void step(Task& t);
  void raise(Task& t, std::int16_t code);
  void after_handler(Task& t, std::uint16_t resume);
  void goto_catch(Task& t, std::int16_t code);
  void terminate(Task& t, std::int16_t code);
  void finish(Task& t);
  void suspend(Task& t, WaitKind kind, std::uint16_t resume);
  bool event_ready(const Task& t) const;
  void wake(Task& t, WakeReason reason);
  void call_fios(Task& t, std::uint16_t index);
  void exec_funcref(Task& t, Cell funcref);
  void run_nested(Task& t, std::uint16_t addr);
  Stack& loop_stack(Task& t) { return cfg_.merge_fs ? t.rs : t.fs; }
  Task& new_task(std::uint16_t frame, std::uint16_t pc, int priority, std::uint64_t relative_deadline_us);
  void reclaim_if_done(std::uint16_t frame);
  std::uint16_t cs_addr(Cell handle, std::size_t bytes) const;

  VmConfig cfg_;
  const isa::Isa* isa_;
  CodeSegment cs_;
  Dictionary dict_;
  IosTable ios_;
  Profile profile_;
  std::vector<Task> tasks_;
  std::map<std::int16_t, Cell> handlers_;
  std::array<OpFn, 256> dispatch_{};
  OutputFn output_;
  HostPort* host_ = nullptr;
  SliceHooks* hooks_ = nullptr;

  std::uint64_t clock_ns_ = 0;  // simulated clock
  std::uint64_t wall_origin_ns_ = 0;
  std::uint64_t total_steps_ = 0;
  std::uint64_t exec_count_ = 0;  // every executed word, nested runs included
  std::uint64_t arrival_seq_ = 0;
  std::uint16_t ready_from_ = 0;  // where the next ready scan starts
  Task* cur_ = nullptr;
  bool stop_ = false;
  int nested_ = 0;
  bool nested_done_ = false;
};

/// Registers the fixed-point DSP functions (sin, log, sigmoid, relu, hull,
/// lowp, highp) as FIOS words.
void register_dsp_library(Vm& vm);

}  // namespace rexa
