#include <doctest.h>

#include <random>

#include "rexa/vm.hpp"
#include "support/testkit.hpp"

using namespace rexa;
using testkit::run_to_end;

namespace {

using Cells = std::vector<Cell>;

std::int16_t error_of(const std::string& src, VmConfig cfg = {}) {
  Vm vm(cfg);
  const auto r = vm.compile(src);
  const int id = vm.spawn(r.frame);
  vm.run_frame(r.frame);
  return vm.task(id)->error;
}

constexpr std::int16_t code(ExceptionCode c) { return static_cast<std::int16_t>(c); }

}  // namespace

TEST_CASE("printing and basic words") {
  Vm vm;
  testkit::Capture cap;
  CHECK(run_to_end(vm, "1 2 + .", &cap).empty());
  CHECK(cap.console == "3 ");
  CHECK(run_to_end(vm, "5 dup") == Cells{5, 5});
  CHECK(run_to_end(vm, "1 2 swap over") == Cells{2, 1, 2});
  CHECK(run_to_end(vm, "1 2 3 rot") == Cells{2, 3, 1});
  CHECK(run_to_end(vm, "1 2 3 -rot") == Cells{3, 1, 2});
  CHECK(run_to_end(vm, "1 2 nip 3 4 tuck") == Cells{2, 4, 3, 4});
  CHECK(run_to_end(vm, "7 8 9 2 pick depth") == Cells{7, 8, 9, 7, 4});
  CHECK(run_to_end(vm, "3 4 2dup 2drop") == Cells{3, 4});
  CHECK(run_to_end(vm, "5 3 2 */ 7 negate -7 abs") == Cells{7, -7, 7});
  CHECK(run_to_end(vm, "1 0= 0 0= 5 not 0 not -1 0<") == Cells{0, -1, 0, -1, -1});
  CHECK(run_to_end(vm, "1 2 < 2 1 < 2 2 <= 2 2 <> 3 3 =") == Cells{-1, 0, -1, 0, -1});
  CHECK(run_to_end(vm, "1 4 lshift 256 4 rshift -1 1 rshift") == Cells{16, 16, 32767});
  CHECK(run_to_end(vm, "12 10 and 12 10 or 12 10 xor") == Cells{8, 14, 6});
  CHECK(run_to_end(vm, "100000l 1l d+ d>s 5 s>d") == Cells{static_cast<Cell>(100001 - 65536), 0, 5});

  cap = {};
  run_to_end(vm, "65 emit cr .\" hi\" -4 .", &cap);
  CHECK(cap.console == "A\nhi-4 ");
  cap = {};
  run_to_end(vm, "9 out", &cap);
  CHECK(cap.stream == "9\n");
  CHECK(cap.console.empty());
}

TEST_CASE("arithmetic matches a 64-bit reference") {
  Vm vm;
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> cell(-32768, 32767);
  const char* ops[] = {"+", "-", "*", "/", "mod", "min", "max"};
  for (int k = 0; k < 3000; ++k) {
    const std::int64_t a = cell(rng);
    std::int64_t b = cell(rng);
    if (k % 5 == 0) b = cell(rng) % 20;
    const int o = static_cast<int>(rng() % 7);
    if ((o == 3 || o == 4) && b == 0) b = 3;
    std::int64_t want = 0;
    switch (o) {
      case 0: want = a + b; break;
      case 1: want = a - b; break;
      case 2: want = a * b; break;
      case 3: want = a / b; break;
      case 4: want = a % b; break;
      case 5: want = std::min(a, b); break;
      case 6: want = std::max(a, b); break;
    }
    const std::string src = std::to_string(a) + " " + std::to_string(b) + " " + ops[o];
    REQUIRE_MESSAGE(run_to_end(vm, src) == Cells{wrap_cell(want)}, src);
  }
  CHECK(run_to_end(vm, "-7 2 / -7 2 mod 7 -2 / 7 -2 mod") == Cells{-3, -1, -3, 1});
  CHECK(run_to_end(vm, "32767 1 + -32768 1 -") == Cells{-32768, 32767});
}

TEST_CASE("faults become exceptions") {
  CHECK(error_of("1 0 /") == code(ExceptionCode::divbyzero));
  CHECK(error_of("1 0 mod") == code(ExceptionCode::divbyzero));
  CHECK(error_of("drop") == code(ExceptionCode::stack));
  CHECK(error_of("5 throw") == 5);
  CHECK(error_of("20 throw") == 20);
  CHECK(error_of("0 throw") == 0);
  VmConfig small;
  small.ds_size = 4;
  CHECK(error_of("1 2 3 4 5", small) == code(ExceptionCode::stack));
  CHECK(error_of("array a 2 5 a read") == code(ExceptionCode::io));
}

TEST_CASE("control flow") {
  Vm vm;
  CHECK(run_to_end(vm, "1 if 10 else 20 endif 0 if 10 else 20 endif") == Cells{10, 20});
  CHECK(run_to_end(vm, "0 5 0 do i + loop") == Cells{10});
  CHECK(run_to_end(vm, "0 10 0 do i + 3 +loop") == Cells{0 + 3 + 6 + 9});
  CHECK(run_to_end(vm, "0 3 0 do 2 0 do j 10 * i + + loop loop") == Cells{0 + 1 + 10 + 11 + 20 + 21});
  CHECK(run_to_end(vm, "0 begin 1+ dup 5 = until") == Cells{5});
  CHECK(run_to_end(vm, "0 begin dup 3 < while 1+ repeat") == Cells{3});
  CHECK(run_to_end(vm, ": f 1 exit 2 ; f 3") == Cells{1, 3});
  CHECK(run_to_end(vm, ": fact dup 1 > if dup 1- fact * endif ; 7 fact") == Cells{5040});
}

TEST_CASE("softcore stack on an array") {
  Vm vm;
  CHECK(run_to_end(vm, "array ms 5 1 ms push ms pop") == Cells{1});
  CHECK(run_to_end(vm, "array ms 5 1 ms push 2 ms push 3 ms push 0 ms get 2 ms get ms pop") == Cells{3, 1, 3});
  CHECK(error_of("array ms 3 1 ms push 2 ms push 3 ms push") == code(ExceptionCode::stack));
  CHECK(error_of("array ms 3 ms pop") == code(ExceptionCode::stack));
}

TEST_CASE("exceptions, handlers and catch points") {
  Vm vm;
  CHECK(run_to_end(vm, "catch if 1 else 2 endif") == Cells{2});
  CHECK(run_to_end(vm, "catch dup 0= if 1 0 / endif") == Cells{code(ExceptionCode::divbyzero)});
  CHECK(run_to_end(vm, "catch dup 0= if 25 throw endif") == Cells{25});

  CHECK(run_to_end(vm, "var hit : h 1 hit ! ; $ h exception divbyzero catch dup 0= if 1 0 / endif hit @") ==
        Cells{code(ExceptionCode::divbyzero), 1});

  // Stacks are realigned to the catch point, loops included.
  VmConfig cfg;
  cfg.persistent_frames = true;
  Vm keep(cfg);
  const auto r = keep.compile("catch dup 0= if 1 2 3 4 0 do 3 0 do 9 drop 1 0 / loop loop endif");
  const int id = keep.spawn(r.frame);
  keep.run_frame(r.frame);
  const Task* t = keep.task(id);
  CHECK(t->error == 0);
  CHECK(t->ds.top() == 1);
  CHECK(t->ds.peek(0) == code(ExceptionCode::divbyzero));
  CHECK(t->rs.top() == 0);
  CHECK(t->fs.top() == 0);

  CHECK(error_of(": h 1 0 / ; $ h exception divbyzero 1 0 /") == code(ExceptionCode::divbyzero));
}

TEST_CASE("slices respect the step budget and encode suspension") {
  VmConfig cfg;
  cfg.persistent_frames = true;
  Vm vm(cfg);
  const auto r = vm.compile("1 2 3 4 5");
  const int id = vm.spawn(r.frame);
  SliceInfo s = vm.vmloop(id, 2, 1000000);
  CHECK(s.steps == 2);
  CHECK(vm.task(id)->ds.top() == 2);
  CHECK(vm.task(id)->pc >= 0);
  CHECK(vm.task(id)->live());
  s = vm.vmloop(id, 100, 1000000);
  CHECK(s.finished);
  CHECK(vm.task(id)->ds.top() == 5);

  const auto y = vm.compile("1 yield 2");
  const int yid = vm.spawn(y.frame);
  s = vm.vmloop(yid, 100, 1000000);
  CHECK(s.suspended);
  const Task* yt = vm.task(yid);
  CHECK(yt->pc < 0);
  CHECK(yt->wait == WaitKind::yield);
  CHECK(~(~yt->resume_pc()) == yt->resume_pc());
  CHECK(static_cast<std::int32_t>(~yt->pc) == yt->resume_pc());
  vm.run_frame(y.frame);
  CHECK(yt->ds.top() == 2);
  CHECK(yt->pc >= 0);

  // The simulated time budget cuts a slice short.
  const auto longrun = vm.compile("0 1000 0 do 1+ loop");
  const int lid = vm.spawn(longrun.frame);
  s = vm.vmloop(lid, 100000, 50);
  CHECK(s.steps <= 51);
  CHECK(s.steps >= 49);
}

TEST_CASE("budget respected on random programs") {
  std::mt19937_64 rng(33);
  for (int round = 0; round < 100; ++round) {
    VmConfig cfg;
    cfg.cs_size = 4096;
    cfg.steps = static_cast<std::uint32_t>(1 + rng() % 40);
    Vm vm(cfg);
    const auto r = vm.compile(testkit::random_program(rng));
    vm.spawn(r.frame);
    for (int k = 0; k < 100000 && vm.live_tasks() > 0; ++k) {
      const SliceInfo s = vm.slice();
      REQUIRE(s.steps <= cfg.steps);
      if (s.task >= 0 && s.suspended) REQUIRE(vm.task(s.task)->pc < 0);
      if (s.task >= 0 && !s.suspended && !s.finished) REQUIRE(vm.task(s.task)->pc >= 0);
    }
    CHECK(vm.live_tasks() == 0);
  }
}

TEST_CASE("preemption delivers interrupt") {
  const std::string src = "var n : h n @ 1+ n ! ; $ h exception interrupt 0 200 0 do i + loop n @";
  VmConfig cfg;
  cfg.steps = 100000;
  cfg.longest_us = 20;
  cfg.preempt = true;
  Vm vm(cfg);
  const Cells s = run_to_end(vm, src);
  REQUIRE(s.size() == 2);
  CHECK(s[0] == 19900);
  CHECK(s[1] > 0);

  cfg.preempt = false;
  Vm calm(cfg);
  CHECK(run_to_end(calm, src) == Cells{19900, 0});
}

TEST_CASE("sleep, await and tasks") {
  Vm vm;
  run_to_end(vm, "10 sleep");
  CHECK(vm.now_us() >= 10000);

  CHECK(run_to_end(vm, "var f 50 1 f await") == Cells{1});
  CHECK(run_to_end(vm, "var f : setter 1 f ! ; 0 0 $ setter task drop 1000 1 f await") == Cells{0});
  CHECK(run_to_end(vm, "var f 1 f ! 1000 1 f await") == Cells{0});

  const Cells ids = run_to_end(vm, ": w 1 drop ; 0 0 $ w task 0 0 $ w task");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] != ids[1]);
  CHECK(ids[0] >= 0);
}

TEST_CASE("replaying a compiled frame from a checkpoint") {
  std::mt19937_64 rng(35);
  for (int round = 0; round < 30; ++round) {
    VmConfig cfg;
    cfg.cs_size = 4096;
    cfg.persistent_frames = true;
    Vm a(cfg);
    const auto r = a.compile(testkit::random_program(rng));
    const auto blob = a.save();
    Vm b(cfg);
    b.restore(blob);
    testkit::Capture ca, cb;
    ca.attach(a);
    cb.attach(b);
    const int ia = a.spawn(r.frame);
    const int ib = b.spawn(r.frame);
    a.run_frame(r.frame);
    b.run_frame(r.frame);
    const auto da = a.task(ia)->ds.contents();
    const auto db = b.task(ib)->ds.contents();
    REQUIRE(std::equal(da.begin(), da.end(), db.begin(), db.end()));
    REQUIRE(ca.console == cb.console);
    REQUIRE(ca.stream == cb.stream);
  }
}
