#pragma once

// Scheduling policies that do not need a running VM: the 2-bit task mask
// selection, the energy-constrained lazy scheduler simulation and profiling.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rexa {

enum class MaskState : std::uint8_t { none = 0b00, timeout = 0b01, event = 0b10, ready = 0b11 };

/// Packed readiness mask, two bits per task at bit position 2*i.
class TaskMask {
 public:
  static constexpr std::size_t kMaxTasks = 16;

  MaskState get(std::size_t i) const { return static_cast<MaskState>((bits_ >> (2 * i)) & 0x3u); }
  void set(std::size_t i, MaskState s) {
    bits_ = (bits_ & ~(0x3u << (2 * i))) | (static_cast<std::uint32_t>(s) << (2 * i));
  }
  std::uint32_t bits() const { return bits_; }
  bool any() const { return bits_ != 0; }

 private:
  std::uint32_t bits_ = 0;
};

enum class WakeReason : std::uint8_t { none, ready, timeout, event };

struct Selection {
  int task = -1;
  WakeReason reason = WakeReason::none;
};

/// Picks the next task from the mask: the first task whose event condition
/// holds wins over the first task whose timeout has passed (now >= timeout),
/// which wins over the first ready task. `event_ready[i]` is the host's
/// evaluation of task i's guard. Ready tasks are scanned cyclically from
/// `ready_from`; the VM passes the slot after the last ready task it served,
/// so perpetually ready tasks take turns.
Selection select_next(const TaskMask& mask, std::size_t task_count, std::span<const std::uint64_t> timeouts,
                      std::uint64_t now, std::span<const bool> event_ready, std::size_t ready_from = 0);

// ---------------------------------------------------------------------------
// Profiling

struct WordStats {
  std::uint64_t calls = 0;
  std::uint64_t steps = 0;
};

struct TaskStats {
  std::uint64_t slices = 0;
  std::uint64_t steps = 0;
  std::uint64_t suspensions = 0;
};

class Profile {
 public:
  void record_word(std::uint32_t key, std::uint64_t steps) {
    auto& w = words_[key];
    ++w.calls;
    w.steps += steps;
  }
  void record_slice(std::uint32_t task, std::uint64_t steps, bool suspended) {
    auto& t = tasks_[task];
    ++t.slices;
    t.steps += steps;
    if (suspended) ++t.suspensions;
  }
  const std::map<std::uint32_t, WordStats>& words() const { return words_; }
  const std::map<std::uint32_t, TaskStats>& tasks() const { return tasks_; }
  std::map<std::uint32_t, WordStats>& words() { return words_; }
  std::map<std::uint32_t, TaskStats>& tasks() { return tasks_; }
  void clear() {
    words_.clear();
    tasks_.clear();
  }

 private:
  std::map<std::uint32_t, WordStats> words_;
  std::map<std::uint32_t, TaskStats> tasks_;
};

/// Mean steps per call of a profiled word, or `fallback` without history.
std::uint64_t estimate_runtime(const Profile& prof, std::uint32_t word, std::uint64_t fallback);
/// Average steps until a task reaches a scheduling point.
std::uint64_t estimate_task_runtime(const Profile& prof, std::uint32_t task, std::uint64_t fallback);

// ---------------------------------------------------------------------------
// Energy-constrained lazy scheduling

/// Piecewise-constant harvested power P_S(t) in microwatts.
class PowerTrace {
 public:
  PowerTrace() = default;
  explicit PowerTrace(double constant) { points_.push_back({0, constant}); }
  /// (time in µs, power from that time on); sorted by time.
  explicit PowerTrace(std::vector<std::pair<std::uint64_t, double>> points);
  static PowerTrace from_csv(const std::string& text);

  double at(std::uint64_t t) const;
  /// Energy in µJ harvested over [t0, t1).
  double integrate(std::uint64_t t0, std::uint64_t t1) const;
  /// First change point strictly after t (or nullopt).
  std::optional<std::uint64_t> next_change(std::uint64_t t) const;

 private:
  std::vector<std::pair<std::uint64_t, double>> points_;
};

struct EnergyAccount {
  double E = 0;      // stored energy, µJ
  double C = 0;      // capacity, µJ
  double P_d1 = 1;   // drain while computing, µW
  double t1 = 1;     // µs per VM instruction
  PowerTrace P_S;    // harvested power

  double slice_cost(std::uint64_t steps) const { return P_d1 * static_cast<double>(steps) * t1 * 1e-6; }
};

struct LsaJob {
  int id = 0;
  std::uint64_t arrival = 0;   // µs
  std::uint64_t deadline = 0;  // µs
  int priority = 0;
  std::uint64_t steps = 0;  // demand in VM instructions
  bool io = false;
};

struct LsaSlice {
  std::uint64_t time = 0;  // slice start, µs
  int job = -1;            // -1 idle
  std::uint64_t steps = 0;
  double energy = 0;       // E after the slice
  bool forced = false;     // deadline drain
};

struct LsaResult {
  std::vector<LsaSlice> trace;
  std::vector<int> completion_order;
  std::vector<int> missed;      // finished at deadline without covered energy
  std::vector<int> infeasible;  // demand exceeds what the storage can ever hold
  double harvested = 0;         // energy that entered storage
  double wasted = 0;            // harvest lost because storage was full
  double drained = 0;           // energy actually removed
  double deficit = 0;           // demand that could not be covered
  double E_initial = 0;
  double E_final = 0;
  std::uint64_t end_time = 0;
};

struct LsaOptions {
  std::uint64_t slice_steps = 64;
  std::uint64_t max_slices = 1'000'000;
  /// Runs a job for up to `steps`; returns steps actually executed and
  /// whether the job finished. Default: steps are consumed from the demand.
  std::function<std::pair<std::uint64_t, bool>(int job, std::uint64_t steps)> runner;
};

/// Queue key: deadline, then higher priority, then arrival, then id.
bool lsa_before(const LsaJob& a, const LsaJob& b);

/// Predicted system runtime t_s = E / (P_d1 - P_S) in µs, infinite when P_S >= P_d1.
double predicted_runtime(double E, double P_d1, double P_S);

LsaResult schedule_lsa(std::vector<LsaJob> jobs, EnergyAccount acct, const LsaOptions& opt = {});

}  // namespace rexa
