#include <doctest.h>

#include <cmath>
#include <random>

#include "rexa/scheduler.hpp"
#include "rexa/vm.hpp"
#include "support/testkit.hpp"

using namespace rexa;

namespace {

Selection pick(std::initializer_list<MaskState> states, std::initializer_list<std::uint64_t> timeouts,
               std::uint64_t now, std::initializer_list<bool> events) {
  TaskMask m;
  std::size_t i = 0;
  for (const auto s : states) m.set(i++, s);
  const std::vector<std::uint64_t> to(timeouts);
  const std::vector<char> evc(events.begin(), events.end());
  std::unique_ptr<bool[]> ev(new bool[evc.size()]);
  for (std::size_t k = 0; k < evc.size(); ++k) ev[k] = evc[k];
  return select_next(m, states.size(), to, now, std::span<const bool>(ev.get(), evc.size()));
}

MaskState expected_mask(const Task& t) {
  switch (t.state) {
    case TaskState::ready:
    case TaskState::running:
      return MaskState::ready;
    case TaskState::waiting_time:
      return MaskState::timeout;
    case TaskState::waiting_event:
      return MaskState::event;
    default:
      return MaskState::none;
  }
}

}  // namespace

TEST_CASE("mask packing") {
  TaskMask m;
  CHECK_FALSE(m.any());
  m.set(0, MaskState::ready);
  m.set(15, MaskState::event);
  m.set(3, MaskState::timeout);
  CHECK(m.get(0) == MaskState::ready);
  CHECK(m.get(15) == MaskState::event);
  CHECK(m.get(3) == MaskState::timeout);
  CHECK(m.bits() == (0b11u | (0b01u << 6) | (0b10u << 30)));
  m.set(0, MaskState::none);
  CHECK(m.get(0) == MaskState::none);
}

TEST_CASE("selection priority classes") {
  auto s = pick({MaskState::ready, MaskState::event}, {0, 0}, 0, {false, true});
  CHECK(s.task == 1);
  CHECK(s.reason == WakeReason::event);
  s = pick({MaskState::ready, MaskState::ready}, {0, 0}, 0, {false, false});
  CHECK(s.task == 0);
  CHECK(s.reason == WakeReason::ready);
  s = pick({MaskState::ready, MaskState::timeout}, {0, 100}, 100, {false, false});
  CHECK(s.task == 1);
  CHECK(s.reason == WakeReason::timeout);
  s = pick({MaskState::timeout, MaskState::event}, {101, 0}, 100, {false, false});
  CHECK(s.task == -1);
  s = pick({MaskState::timeout, MaskState::event}, {50, 0}, 100, {false, true});
  CHECK(s.task == 1);

  TaskMask m;
  m.set(0, MaskState::ready);
  m.set(2, MaskState::ready);
  const std::uint64_t to[3] = {0, 0, 0};
  const bool ev[3] = {false, false, false};
  CHECK(select_next(m, 3, to, 0, ev, 1).task == 2);
  CHECK(select_next(m, 3, to, 0, ev, 3).task == 0);
}

TEST_CASE("task table") {
  VmConfig cfg;
  cfg.max_tasks = 3;
  cfg.persistent_frames = true;
  Vm vm(cfg);
  const auto r = vm.compile("begin yield again");
  const int a = vm.spawn(r.frame);
  const int b = vm.spawn(r.frame, -1);
  CHECK(a != b);
  CHECK(vm.mask().get(static_cast<std::size_t>(a)) == MaskState::ready);
  CHECK(vm.mask().get(static_cast<std::size_t>(b)) == MaskState::ready);
  CHECK(vm.task(b)->event_task());
  CHECK_FALSE(vm.task(a)->event_task());
  vm.spawn(r.frame);
  CHECK_THROWS_AS(vm.spawn(r.frame), Error);

  VmConfig bad;
  bad.max_tasks = 17;
  CHECK_THROWS_AS(Vm{bad}, ConfigError);
}

TEST_CASE("sleeping and waiting tasks show in the mask") {
  Vm vm;
  const auto r = vm.compile("10 sleep var f 1000 1 f await");
  const int id = vm.spawn(r.frame);
  vm.slice();
  CHECK(vm.task(id)->state == TaskState::waiting_time);
  CHECK(vm.mask().get(static_cast<std::size_t>(id)) == MaskState::timeout);
  CHECK(vm.task(id)->pc < 0);
  CHECK(vm.next_wakeup() == 10000);

  vm.advance_clock(9000);
  CHECK(vm.slice().task == -1);
  vm.advance_clock(2000);
  const auto s = vm.slice();
  CHECK(s.task == id);
  CHECK(s.reason == WakeReason::timeout);
  CHECK(vm.task(id)->state == TaskState::waiting_event);
  CHECK(vm.mask().get(static_cast<std::size_t>(id)) == MaskState::event);
  CHECK(vm.task(id)->guard.has_value());
}

TEST_CASE("mask stays coherent with task states") {
  std::mt19937_64 rng(41);
  for (int round = 0; round < 40; ++round) {
    VmConfig cfg;
    cfg.cs_size = 8192;
    cfg.steps = static_cast<std::uint32_t>(4 + rng() % 30);
    Vm vm(cfg);
    const int n = static_cast<int>(1 + rng() % 5);
    for (int k = 0; k < n; ++k) {
      testkit::ProgramOptions opt;
      opt.statements = 15;
      const auto r = vm.compile(testkit::random_program(rng, opt));
      vm.spawn(r.frame, static_cast<int>(rng() % 3) - 1);
    }
    for (int k = 0; k < 20000 && vm.live_tasks() > 0; ++k) {
      vm.slice();
      const TaskMask m = vm.mask();
      for (std::size_t i = 0; i < vm.tasks().size(); ++i) {
        const Task& t = vm.tasks()[i];
        REQUIRE(m.get(i) == expected_mask(t));
        if (t.state == TaskState::waiting_time || t.state == TaskState::waiting_event) REQUIRE(t.pc < 0);
      }
    }
    CHECK(vm.live_tasks() == 0);
  }
}

TEST_CASE("ready tasks are served round robin") {
  for (int n = 1; n <= 8; ++n) {
    VmConfig cfg;
    cfg.persistent_frames = true;
    Vm vm(cfg);
    const auto r = vm.compile("begin yield again");
    for (int k = 0; k < n; ++k) vm.spawn(r.frame);
    std::vector<int> order;
    for (int k = 0; k < 20 * n; ++k) order.push_back(vm.slice().task);
    for (std::size_t w = 0; w + static_cast<std::size_t>(n) <= order.size(); ++w) {
      std::vector<bool> seen(static_cast<std::size_t>(n));
      for (int k = 0; k < n; ++k) seen[static_cast<std::size_t>(order[w + static_cast<std::size_t>(k)])] = true;
      REQUIRE(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
    }
  }
}

TEST_CASE("runtime estimates from profiles") {
  Profile p;
  CHECK(estimate_runtime(p, 7, 64) == 64);
  for (int k = 0; k < 10; ++k) p.record_word(7, 100);
  CHECK(estimate_runtime(p, 7, 64) == 100);
  p.record_word(8, 50);
  p.record_word(8, 150);
  CHECK(estimate_runtime(p, 8, 64) == 100);
  CHECK(estimate_task_runtime(p, 0, 64) == 64);
  p.record_slice(0, 30, true);
  p.record_slice(0, 10, true);
  CHECK(estimate_task_runtime(p, 0, 64) == 20);

  Vm vm;
  testkit::run_to_end(vm, ": w 5 0 do loop ; w w w");
  bool found = false;
  for (const auto& [key, st] : vm.profile().words())
    if (st.calls == 3) found = true;
  CHECK(found);
}

TEST_CASE("power traces") {
  const PowerTrace p({{0, 10}, {100, 20}});
  CHECK(p.at(99) == 10);
  CHECK(p.at(100) == 20);
  CHECK(p.integrate(50, 150) == doctest::Approx(1.5e-3));
  CHECK(p.next_change(0) == 100);
  CHECK_FALSE(p.next_change(100));
  const auto q = PowerTrace::from_csv("time_us,power_uw\n0,5\n# note\n1000000,0\n");
  CHECK(q.integrate(0, 2000000) == doctest::Approx(5.0));
  CHECK_THROWS_AS(PowerTrace::from_csv("0,5\nbad\n"), ConfigError);

  CHECK(predicted_runtime(100, 10, 5) == doctest::Approx(20e6));
  CHECK(std::isinf(predicted_runtime(100, 10, 10)));
}

TEST_CASE("lazy scheduling") {
  EnergyAccount acct;
  acct.C = 1000;
  acct.E = 1000;
  acct.P_d1 = 100;
  acct.t1 = 1;
  acct.P_S = PowerTrace(0.0);
  LsaJob one{0, 0, 100000, 0, 500, false};
  auto r = schedule_lsa({one}, acct);
  CHECK(r.completion_order == std::vector<int>{0});
  CHECK(r.missed.empty());
  CHECK(r.trace.size() >= 8);
  CHECK(r.E_final == doctest::Approx(1000 - acct.slice_cost(500)));

  // Storage for one job only: the earlier deadline is served and the other
  // is drained at its deadline without cover.
  acct.C = 10;
  acct.E = 10;
  acct.P_d1 = 10000;
  LsaJob a{0, 0, 5000, 0, 900, false};
  LsaJob b{1, 0, 4000, 0, 900, false};
  r = schedule_lsa({a, b}, acct);
  REQUIRE(r.completion_order.size() == 2);
  CHECK(r.completion_order[0] == 1);
  CHECK(r.missed == std::vector<int>{0});

  acct.C = 1;
  LsaJob huge{3, 0, 10, 0, 1000000, false};
  r = schedule_lsa({huge}, acct);
  CHECK(r.infeasible == std::vector<int>{3});

  CHECK(lsa_before({0, 0, 10, 0, 1, false}, {1, 0, 20, 5, 1, false}));
  CHECK(lsa_before({0, 0, 10, 5, 1, false}, {1, 0, 10, 0, 1, false}));
  CHECK(lsa_before({0, 0, 10, 0, 1, false}, {1, 1, 10, 0, 1, false}));
}

TEST_CASE("zero storage gives earliest deadline first") {
  std::mt19937_64 rng(43);
  for (int set = 0; set < 300; ++set) {
    std::vector<LsaJob> jobs;
    const int n = static_cast<int>(1 + rng() % 6);
    for (int k = 0; k < n; ++k) {
      const std::uint64_t arr = rng() % 1000;
      jobs.push_back({k, arr, arr + 20 + rng() % 3000, static_cast<int>(rng() % 3), 1 + rng() % 400, false});
    }
    EnergyAccount acct;
    acct.C = 0;
    acct.P_d1 = 500;
    acct.P_S = PowerTrace(static_cast<double>(rng() % 300));
    LsaOptions opt;
    opt.slice_steps = 32;
    const auto r = schedule_lsa(jobs, acct, opt);
    const auto ref = testkit::edf_reference(jobs, opt.slice_steps, acct.t1);
    std::vector<int> got;
    for (const auto& s : r.trace)
      if (s.job >= 0) got.push_back(s.job);
    REQUIRE(got == ref.slices);
    REQUIRE(r.completion_order == ref.completion);
  }
}
