#include <doctest.h>

#include <random>

#include "rexa/checkpoint.hpp"
#include "rexa/error.hpp"
#include "rexa/host.hpp"
#include "rexa/vm.hpp"
#include "support/testkit.hpp"

using namespace rexa;
using Bytes = std::vector<std::uint8_t>;

namespace {

std::uint32_t bitwise_crc32(std::span<const std::uint8_t> b) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (const auto byte : b) {
    c ^= byte;
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t le32(const Bytes& b, std::size_t at) {
  return b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
  Bytes b(n);
  for (auto& x : b) x = static_cast<std::uint8_t>(rng());
  return b;
}

struct Snapshot {
  std::vector<std::vector<Cell>> stacks;
  std::vector<std::int16_t> errors;
  std::string console, stream;
  bool operator==(const Snapshot&) const = default;
};

Snapshot finish(Vm& vm, testkit::Capture& cap) {
  for (std::size_t k = 0; k < 200000 && vm.live_tasks() > 0; ++k)
    if (vm.slice().task < 0) {
      const auto t = vm.next_wakeup();
      if (!t) break;
      vm.set_clock(std::max(*t, vm.now_us()));
    }
  Snapshot s;
  for (const Task& t : vm.tasks()) {
    const auto c = t.ds.contents();
    s.stacks.emplace_back(c.begin(), c.end());
    s.errors.push_back(t.error);
  }
  s.console = cap.console;
  s.stream = cap.stream;
  return s;
}

}  // namespace

TEST_CASE("crc32") {
  const std::string check = "123456789";
  const Bytes b(check.begin(), check.end());
  CHECK(crc32_of(b) == 0xCBF43926u);
  std::mt19937_64 rng(5);
  for (int k = 0; k < 200; ++k) {
    const Bytes r = random_bytes(rng, rng() % 300);
    REQUIRE(crc32_of(r) == bitwise_crc32(r));
  }
}

TEST_CASE("byte streams") {
  ByteWriter w;
  w.u8(0xAB);
  w.u16(0x1234);
  w.i32(-5);
  w.u64(0x0102030405060708ull);
  w.f64(-2.5);
  w.str("text");
  w.bytes(Bytes{1, 2, 3});
  const Bytes out = w.take();
  CHECK(out[1] == 0x34);
  CHECK(out[2] == 0x12);

  ByteReader r(out);
  CHECK(r.u8() == 0xAB);
  CHECK(r.u16() == 0x1234);
  CHECK(r.i32() == -5);
  CHECK(r.u64() == 0x0102030405060708ull);
  CHECK(r.f64() == -2.5);
  CHECK(r.str() == "text");
  CHECK(r.bytes() == Bytes{1, 2, 3});
  CHECK(r.done());
  CHECK_THROWS_AS(r.u8(), CheckpointError);

  ByteWriter lie;
  lie.u32(1000);
  const Bytes l = lie.take();
  ByteReader lr(l);
  CHECK_THROWS_AS(lr.bytes(), CheckpointError);
}

TEST_CASE("container layout") {
  Checkpoint cp;
  cp.add(Section::code, {1, 2, 3});
  cp.add(Section::registers, {});
  const Bytes blob = cp.encode();
  REQUIRE(blob.size() >= 7 + 2 * 14 + 3);
  CHECK(std::string(blob.begin(), blob.begin() + 4) == "RXCP");
  CHECK(blob[4] == kCheckpointVersion);
  CHECK((blob[5] | (blob[6] << 8)) == 2);
  // First entry: the code section.
  CHECK((blob[7] | (blob[8] << 8)) == static_cast<int>(Section::code));
  const std::uint32_t off = le32(blob, 9), len = le32(blob, 13), crc = le32(blob, 17);
  CHECK(len == 3);
  CHECK(Bytes(blob.begin() + off, blob.begin() + off + len) == Bytes{1, 2, 3});
  CHECK(crc == bitwise_crc32(Bytes{1, 2, 3}));

  const Checkpoint back = Checkpoint::decode(blob);
  CHECK(back.section(Section::code) == Bytes{1, 2, 3});
  CHECK(back.section(Section::registers).empty());
  CHECK_FALSE(back.has(Section::host));
  CHECK_THROWS_AS(back.section(Section::host), CheckpointError);
}

TEST_CASE("damaged containers are rejected") {
  std::mt19937_64 rng(6);
  Checkpoint cp;
  cp.add(Section::config, random_bytes(rng, 20));
  cp.add(Section::code, random_bytes(rng, 300));
  cp.add(Section::tasks, random_bytes(rng, 64));
  const Bytes blob = cp.encode();
  const std::size_t header = 7 + 3 * 14;

  for (std::size_t n = 0; n < blob.size(); ++n)
    REQUIRE_THROWS_AS(Checkpoint::decode(std::span(blob.data(), n)), CheckpointError);

  for (std::size_t at = header; at < blob.size(); ++at) {
    Bytes bad = blob;
    bad[at] ^= static_cast<std::uint8_t>(1u << (at % 8));
    REQUIRE_THROWS_AS(Checkpoint::decode(bad), CheckpointError);
  }
  for (std::size_t at = 0; at < 5; ++at) {
    Bytes bad = blob;
    bad[at] ^= 0x20;
    CHECK_THROWS_AS(Checkpoint::decode(bad), CheckpointError);
  }
  // Offsets, lengths and checksums in the table are covered too.
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t f = 2; f < 14; ++f) {
      Bytes bad = blob;
      bad[7 + e * 14 + f] ^= 0x01;
      REQUIRE_THROWS_AS(Checkpoint::decode(bad), CheckpointError);
    }
}

TEST_CASE("idle vm round trip") {
  Vm vm;
  testkit::run_to_end(vm, ": sq dup * ; export sq var x 3 x !");
  const Bytes a = vm.save();
  Vm other;
  other.restore(a);
  CHECK(other.save() == a);
  CHECK(testkit::run_to_end(other, "import sq 7 sq") == std::vector<Cell>{49});

  Bytes wrong = a;
  wrong[0] = 'X';
  CHECK_THROWS_AS(other.restore(wrong), CheckpointError);

  VmConfig larger;
  larger.cs_size = 4096;
  Vm mismatched(larger);
  CHECK_THROWS_AS(mismatched.restore(a), CheckpointError);
}

TEST_CASE("interrupted runs finish like straight runs") {
  std::mt19937_64 rng(77);
  for (int round = 0; round < 20; ++round) {
    VmConfig cfg;
    cfg.cs_size = 8192;
    cfg.steps = static_cast<std::uint32_t>(8 + rng() % 40);
    std::vector<std::string> progs;
    const int n = static_cast<int>(1 + rng() % 3);
    for (int k = 0; k < n; ++k) progs.push_back(testkit::random_program(rng));

    auto start = [&](Vm& vm) {
      for (const auto& p : progs) vm.spawn(vm.compile(p).frame);
    };
    Vm straight(cfg);
    testkit::Capture c1;
    c1.attach(straight);
    start(straight);
    const Snapshot want = finish(straight, c1);

    Vm first(cfg);
    testkit::Capture c2;
    c2.attach(first);
    start(first);
    const std::size_t cut = rng() % 50;
    for (std::size_t k = 0; k < cut && first.live_tasks() > 0; ++k) first.slice();
    const Bytes blob = first.save();

    Vm second(cfg);
    testkit::Capture c3;
    c3.attach(second);
    c3.console = c2.console;
    c3.stream = c2.stream;
    second.restore(blob);
    CAPTURE(round);
    REQUIRE(finish(second, c3) == want);
  }
}

TEST_CASE("host devices are part of the checkpoint") {
  host::NodeConfig cfg = host::NodeConfig::from_json(testkit::read_fixture("node_ex.json"));
  host::Node a(cfg);
  testkit::Capture ca;
  ca.attach(a.vm());
  const auto r = a.vm().compile(testkit::read_fixture("ex1_peak.rx"));
  a.vm().spawn(r.frame);
  a.vm().slice();
  REQUIRE(a.adc_busy());
  const Bytes blob = a.vm().save();
  Checkpoint::decode(blob).section(Section::host);

  host::Node b(cfg);
  testkit::Capture cb;
  cb.attach(b.vm());
  b.vm().restore(blob);
  CHECK(b.adc_busy());
  a.vm().run_frame(r.frame);
  b.vm().run_frame(r.frame);
  CHECK(cb.console == ca.console);
  CHECK(b.samples() == a.samples());
  CHECK(cb.console.starts_with("Peak: 2500 at 333"));
}
