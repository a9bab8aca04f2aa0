#include <doctest.h>

#include <random>

#include "rexa/bytecode.hpp"
#include "rexa/compiler.hpp"
#include "rexa/vm.hpp"
#include "support/testkit.hpp"

using namespace rexa;

namespace {

std::vector<std::uint8_t> code_of(const Vm& vm, const CompileResult& r) {
  const auto* p = vm.cs().data() + r.start;
  return {p, p + (r.code_end - r.start)};
}

CompileErrorKind error_kind(const std::string& src) {
  Vm vm;
  try {
    vm.compile(src);
  } catch (const CompileError& e) {
    return e.kind();
  }
  FAIL("compiled without error: " << src);
  return CompileErrorKind::syntax;
}

VmConfig roomy(isa::LookupMode mode = isa::LookupMode::pht) {
  VmConfig c;
  c.cs_size = 8192;
  c.lookup = mode;
  c.persistent_frames = true;
  return c;
}

}  // namespace

TEST_CASE("tokenizer") {
  auto t = tokenize("1 2 + . cr");
  REQUIRE(t.size() == 5);
  CHECK(t[0].kind == TokenKind::integer);
  CHECK(t[0].value == 1);
  CHECK(t[2].text == "+");
  CHECK(t[4].text == "cr");

  t = tokenize("( note ) dup");
  REQUIRE(t.size() == 1);
  CHECK(t[0].text == "dup");
  CHECK(t[0].begin == 9);

  t = tokenize("123456l ");
  REQUIRE(t.size() == 1);
  CHECK(t[0].kind == TokenKind::double_integer);
  CHECK(t[0].value == 123456);

  t = tokenize("  -42\n\n\tswap");
  REQUIRE(t.size() == 2);
  CHECK(t[0].value == -42);

  CHECK_THROWS_AS(tokenize("( never closed"), CompileError);
}

TEST_CASE("words shrink to opcodes in place") {
  Vm vm;
  const auto r = vm.compile("dup");
  const auto code = code_of(vm, r);
  REQUIRE(code.size() == 2);
  CHECK(code[0] == *vm.isa().lookup("dup", isa::LookupMode::pht));
  CHECK(code[1] == op::kEnd);
  CHECK(r.stats.source_bytes == 3);
  CHECK(r.stats.code_bytes == 2);
}

TEST_CASE("single digit literal is the tightest fit") {
  Vm vm;
  const auto r = vm.compile("7 ");
  const auto code = code_of(vm, r);
  REQUIRE(code.size() == 3);
  const auto d = decode_literal(code.data());
  CHECK(d.value == 7);
  CHECK(d.length == 2);
  CHECK(code[2] == op::kEnd);
  CHECK(testkit::run_to_end(vm, "7") == std::vector<Cell>{7});
  CHECK(testkit::run_to_end(vm, "1 2 3") == std::vector<Cell>{1, 2, 3});
}

TEST_CASE("double literal suffix") {
  Vm vm;
  const auto r = vm.compile("123456l ");
  const auto code = code_of(vm, r);
  const auto d = decode_literal(code.data());
  CHECK(d.is_double);
  CHECK(d.value == 123456);
  CHECK(testkit::run_to_end(vm, "123456l") == std::vector<Cell>{1, static_cast<Cell>(123456 - 65536)});
  CHECK(testkit::run_to_end(vm, "05l") == std::vector<Cell>{0, 5});
  // A double literal needs two digits before the suffix to leave room for four bytes.
  CHECK(error_kind("5l") == CompileErrorKind::in_place_overrun);
  CHECK(testkit::run_to_end(vm, "8191 8192 -8192 -8193") == std::vector<Cell>{8191, 8192, -8192, -8193});
  CHECK(testkit::run_to_end(vm, "32767 -32768") == std::vector<Cell>{32767, -32768});
}

TEST_CASE("literal encoding boundaries") {
  for (std::int32_t v = -9000; v <= 9000; ++v) {
    const auto e = encode_literal(v);
    REQUIRE(decode_literal(e.bytes.data()).value == v);
    REQUIRE(e.length == (v >= -8192 && v <= 8191 ? 2u : 4u));
  }
  CHECK(encode_literal(0).length == 2);
  CHECK(encode_literal(0).bytes[0] == op::kShortTag);
  CHECK_THROWS_AS(encode_literal(-(1 << 29) - 1), Error);
  CHECK_THROWS_AS(encode_literal(1 << 29), Error);
}

TEST_CASE("compile errors carry kind and position") {
  CHECK(error_kind("1 2 frob") == CompileErrorKind::unknown_word);
  CHECK(error_kind("536870912l") == CompileErrorKind::literal_range);
  CHECK(error_kind(".\" open") == CompileErrorKind::syntax);
  CHECK(error_kind("( open") == CompileErrorKind::syntax);
  CHECK(error_kind("import nope") == CompileErrorKind::import_missing);
  CHECK(error_kind("export nothing") == CompileErrorKind::unknown_word);
  CHECK(error_kind("1 if") == CompileErrorKind::syntax);
  CHECK(error_kind("endif") == CompileErrorKind::syntax);
  CHECK(error_kind(": a : b ; ;") == CompileErrorKind::syntax);
  CHECK(error_kind("loop") == CompileErrorKind::syntax);

  std::string deep;
  for (int i = 0; i < 17; ++i) deep += "1 if ";
  for (int i = 0; i < 17; ++i) deep += "endif ";
  CHECK(error_kind(deep) == CompileErrorKind::syntax);

  Vm vm;
  try {
    vm.compile("1 2 frob");
    FAIL("expected an error");
  } catch (const CompileError& e) {
    CHECK(e.offset() == 4);
  }
  CHECK(vm.cs().frames().empty());
}

TEST_CASE("embedded data") {
  Vm vm;
  CHECK(testkit::run_to_end(vm, "array biasI { -2 15 0 1 } 0 biasI read 1 biasI read 3 biasI read") ==
        std::vector<Cell>{-2, 15, 1});
  CHECK(testkit::run_to_end(vm, "var peak 0 peak ! peak @") == std::vector<Cell>{0});
  CHECK(testkit::run_to_end(vm, "var x 70 x ! x @ 1+ x ! x @") == std::vector<Cell>{71});
  CHECK(testkit::run_to_end(vm, "array input 4 3 input read 9 2 input write 2 input read") == std::vector<Cell>{0, 9});

  VmConfig cfg;
  cfg.persistent_frames = true;
  Vm keep(cfg);
  const auto r = keep.compile("array input 40 1");
  CHECK(r.stats.frame_bytes >= r.stats.code_bytes + 80);
  const auto r2 = keep.compile("const N 5 N N +");
  const int id = keep.spawn(r2.frame);
  keep.run_frame(r2.frame);
  CHECK(keep.task(id)->ds.peek(0) == 10);
}

TEST_CASE("definitions, export and import") {
  VmConfig cfg;
  cfg.persistent_frames = true;
  Vm vm(cfg);
  testkit::Capture cap;
  const auto lib = vm.compile(": sq dup * ; export sq : hidden 1 ;");
  CHECK(vm.cs().find(lib.frame)->locked);
  CHECK(vm.dict().lookup("sq"));
  CHECK_FALSE(vm.dict().lookup("hidden"));
  CHECK_THROWS_AS(vm.free_frame(lib.frame), FrameLocked);

  CHECK(testkit::run_to_end(vm, "import sq 7 sq", &cap) == std::vector<Cell>{49});
  CHECK(testkit::run_to_end(vm, "12 sq") == std::vector<Cell>{144});
  CHECK(testkit::run_to_end(vm, ": sq 1 ; 12 sq") == std::vector<Cell>{12, 1});

  const auto fwd = vm.compile(": forward 2 * ; 21 forward");
  const auto code = code_of(vm, fwd);
  bool has_call = false;
  for (std::size_t k = 0; k + 2 < code.size();) {
    if (code[k] == op::kCall) has_call = true;
    k += word_length(&code[k], code.size() - k);
  }
  CHECK(has_call);
}

TEST_CASE("foreign functions resolve by name") {
  Vm vm;
  register_dsp_library(vm);
  CHECK(testkit::run_to_end(vm, "0 sigmoid") == std::vector<Cell>{500});
  const auto s = testkit::run_to_end(vm, "$ sigmoid");
  REQUIRE(s.size() == 1);
  CHECK(s[0] <= -257);
}

TEST_CASE("compilation is deterministic and table independent") {
  std::mt19937_64 rng(21);
  for (int round = 0; round < 200; ++round) {
    const std::string src = testkit::random_program(rng);
    Vm a(roomy(isa::LookupMode::pht)), b(roomy(isa::LookupMode::pht)), c(roomy(isa::LookupMode::lst));
    const auto ra = a.compile(src);
    const auto rb = b.compile(src);
    const auto rc = c.compile(src);
    const auto* fa = a.cs().find(ra.frame);
    REQUIRE(fa->length == b.cs().find(rb.frame)->length);
    REQUIRE(fa->length == c.cs().find(rc.frame)->length);
    const auto* pa = a.cs().data() + fa->start;
    REQUIRE(std::equal(pa, pa + fa->length, b.cs().data() + rb.start));
    REQUIRE(std::equal(pa, pa + fa->length, c.cs().data() + rc.start));
  }
}

TEST_CASE("writes never pass the read cursor") {
  struct Audit : CompileObserver {
    std::size_t bad = 0, writes = 0;
    void on_emit(std::size_t begin, std::size_t end, std::size_t read_cursor) override {
      ++writes;
      if (begin > end || end > read_cursor) ++bad;
    }
  };
  std::mt19937_64 rng(22);
  for (int round = 0; round < 200; ++round) {
    Vm vm(roomy());
    Audit audit;
    vm.compile(testkit::random_program(rng), &audit);
    REQUIRE(audit.bad == 0);
    CHECK(audit.writes > 0);
  }
  for (const char* tight : {"7", "7 ", "1 2", "-1", "09l", "8192", ".\" \"", ": a ; a"}) {
    Vm vm;
    Audit audit;
    vm.compile(tight, &audit);
    CHECK(audit.bad == 0);
  }
}
