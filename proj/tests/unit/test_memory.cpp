#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "rexa/error.hpp"
#include "rexa/isa.hpp"
#include "rexa/memory.hpp"

using namespace rexa;

namespace {

void check_partition(const CodeSegment& cs) {
  std::size_t sum = 0;
  std::uint32_t prev_end = 0;
  for (const auto& f : cs.frames()) {
    REQUIRE(f.start >= prev_end);
    REQUIRE(f.end() <= cs.size());
    prev_end = f.end();
    sum += f.length;
  }
  CHECK(sum + cs.free_bytes() == cs.size());
}

}  // namespace

TEST_CASE("frames are allocated first fit") {
  CodeSegment cs(1024);
  const auto a = cs.alloc(100).id;
  const auto b = cs.alloc(100).id;
  CHECK(cs.find(a)->start == 0);
  CHECK(cs.find(b)->start == 100);
  CHECK(cs.find(a)->state == FrameState::source);
  CHECK_THROWS_AS(cs.alloc(2000), CsExhausted);

  const auto c = cs.alloc(50).id;
  cs.free(b);
  const auto d = cs.alloc(60).id;
  CHECK(cs.find(d)->start == 100);
  CHECK(cs.find(c)->start == 200);
  CHECK(cs.frame_at(130)->id == d);
  CHECK(cs.frame_at(170) == nullptr);

  cs.free(d);
  const auto e = cs.alloc(100).id;
  CHECK(cs.find(e)->start == 100);
  check_partition(cs);
}

TEST_CASE("protected frames cannot be reclaimed") {
  CodeSegment cs(256);
  auto& f = cs.alloc(10);
  f.locked = true;
  CHECK_THROWS_AS(cs.free(f.id), FrameLocked);
  auto& g = cs.alloc(10);
  g.persistent = true;
  CHECK_THROWS_AS(cs.free(g.id), FrameLocked);
  auto& h = cs.alloc(10);
  h.live_tasks = 1;
  CHECK_THROWS_AS(cs.free(h.id), FrameLocked);
  check_partition(cs);
}

TEST_CASE("resize grows into the following gap only") {
  CodeSegment cs(300);
  const auto a = cs.alloc(100).id;
  const auto b = cs.alloc(100).id;
  CHECK_THROWS(cs.resize(a, 150));
  cs.resize(a, 40);
  CHECK(cs.find(a)->length == 40);
  cs.resize(a, 100);
  cs.resize(b, 200);
  CHECK(cs.free_bytes() == 0);
  check_partition(cs);
}

TEST_CASE("random alloc and free sequences never leak") {
  std::mt19937_64 rng(3);
  CodeSegment cs(4096);
  std::vector<std::uint16_t> live;
  for (int step = 0; step < 5000; ++step) {
    if (live.empty() || rng() % 3 != 0) {
      const std::size_t len = 1 + rng() % 300;
      if (len <= cs.largest_free()) {
        live.push_back(cs.alloc(len).id);
      } else {
        CHECK_THROWS_AS(cs.alloc(len), CsExhausted);
      }
    } else {
      const std::size_t k = rng() % live.size();
      cs.free(live[k]);
      live.erase(live.begin() + static_cast<std::ptrdiff_t>(k));
    }
    check_partition(cs);
  }
}

TEST_CASE("stack basics") {
  Stack s(4);
  s.push(5);
  CHECK(s.pop() == 5);
  CHECK_THROWS_AS(s.pop(), VmFault);
  for (int i = 0; i < 4; ++i) s.push(static_cast<Cell>(i));
  CHECK_THROWS_AS(s.push(9), VmFault);
  CHECK(s.peek(0) == 3);
  CHECK(s.peek(3) == 0);
  try {
    s.push(1);
  } catch (const VmFault& f) {
    CHECK(f.code == static_cast<std::int16_t>(ExceptionCode::stack));
  }
  s.clear();
  s.push(1);
  CHECK_THROWS_AS(s.pop2(), VmFault);
}

TEST_CASE("double cells survive the stack") {
  Stack s(8);
  s.push2(70000);
  CHECK(s.peek(0) == static_cast<Cell>(70000 & 0xFFFF));
  CHECK(s.peek(1) == 1);
  CHECK(s.pop2().value() == 70000);

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::int32_t> d(INT32_MIN, INT32_MAX);
  for (std::int32_t v : {INT32_MIN, INT32_MAX, -1, 0, 65535, 65536, -65536}) {
    s.push2(v);
    REQUIRE(s.pop2().value() == v);
  }
  for (int i = 0; i < 100000; ++i) {
    const std::int32_t v = d(rng);
    s.push2(v);
    REQUIRE(s.pop2().value() == v);
    const DoubleCell dc = DoubleCell::from(v);
    REQUIRE(static_cast<std::int64_t>(dc.msw) * 65536 + static_cast<std::uint16_t>(dc.lsw) == v);
  }
}

TEST_CASE("dictionary shadowing and frame removal") {
  Dictionary d(8, 4);
  CHECK_FALSE(d.lookup("missing"));
  d.define("f", 1, 120);
  CHECK(d.lookup("f") == 120);
  d.define("f", 2, 200);
  CHECK(d.lookup("f") == 200);
  d.remove_frame(2);
  CHECK(d.lookup("f") == 120);
  d.remove_frame(1);
  CHECK_FALSE(d.lookup("f"));
  CHECK(d.size() == 0);

  for (int i = 0; i < 8; ++i) d.define("w" + std::to_string(i), 3, static_cast<std::uint16_t>(i));
  CHECK_THROWS_AS(d.define("extra", 3, 0), Error);
  const auto all = d.entries();
  REQUIRE(all.size() == 8);
  for (int i = 0; i < 8; ++i) CHECK(all[i].name == "w" + std::to_string(i));
}

TEST_CASE("dictionary never points into a reclaimed frame") {
  std::mt19937_64 rng(9);
  Dictionary d(512, 16);
  std::map<std::uint16_t, bool> alive;
  std::vector<std::string> names;
  for (int i = 0; i < 20; ++i) names.push_back("n" + std::to_string(i));
  for (int step = 0; step < 3000; ++step) {
    const auto frame = static_cast<std::uint16_t>(1 + rng() % 10);
    if (rng() % 4 == 0) {
      d.remove_frame(frame);
      alive[frame] = false;
    } else if (d.size() < d.capacity()) {
      d.define(names[rng() % names.size()], frame, static_cast<std::uint16_t>(frame * 100));
      alive[frame] = true;
    }
    for (const auto& n : names) {
      if (const auto* e = d.find(n)) REQUIRE(alive[e->frame]);
    }
  }
}

TEST_CASE("no core word exposes the return stack") {
  for (const auto& w : isa::default_wordlist()) {
    CHECK(w.name != ">r");
    CHECK(w.name != "r>");
    CHECK(w.name != "r@");
    CHECK(w.tag.find("rstack") == std::string::npos);
  }
}
