#include <doctest.h>

#include <random>
#include <thread>

#include "rexa/callgate.hpp"
#include "support/testkit.hpp"

using namespace rexa;

namespace {

std::string random_text(std::mt19937_64& rng, std::size_t max) {
  std::string s(rng() % (max + 1), ' ');
  for (auto& c : s) c = static_cast<char>(rng() % 256);
  return s;
}

Request random_request(std::mt19937_64& rng) {
  Request r;
  r.type = static_cast<RequestType>(1 + rng() % 10);
  switch (r.type) {
    case RequestType::compile:
    case RequestType::exec:
      r.text = random_text(rng, 300);
      if (r.type == RequestType::exec) {
        r.max_slices = static_cast<std::uint32_t>(rng());
        r.priority = static_cast<std::int16_t>(rng());
        r.deadline_us = static_cast<std::uint32_t>(rng());
      }
      break;
    case RequestType::run:
      r.frame = static_cast<std::uint16_t>(rng());
      r.max_slices = static_cast<std::uint32_t>(rng());
      break;
    case RequestType::spawn:
      r.frame = static_cast<std::uint16_t>(rng());
      r.priority = static_cast<std::int16_t>(rng());
      r.deadline_us = static_cast<std::uint32_t>(rng());
      break;
    case RequestType::dios_read:
    case RequestType::dios_write:
      r.name = "n" + std::to_string(rng() % 1000);
      r.index = static_cast<std::uint16_t>(rng());
      if (r.type == RequestType::dios_write) r.value = static_cast<std::int32_t>(rng());
      break;
    case RequestType::install_callback:
      r.mask = static_cast<std::uint8_t>(rng());
      break;
    case RequestType::restore: {
      const std::string b = random_text(rng, 500);
      r.blob.assign(b.begin(), b.end());
      break;
    }
    default:
      break;
  }
  return r;
}

}  // namespace

TEST_CASE("request codec round trip") {
  std::mt19937_64 rng(51);
  for (int k = 0; k < 5000; ++k) {
    const Request r = random_request(rng);
    const auto bytes = encode_request(r);
    REQUIRE(bytes[0] == kFrameSync);
    REQUIRE(decode_request(decode_frame(bytes)) == r);
  }
}

TEST_CASE("response codec round trip") {
  std::mt19937_64 rng(52);
  for (int k = 0; k < 3000; ++k) {
    Response r;
    r.type = static_cast<ResponseType>(0x81 + rng() % 5);
    switch (r.type) {
      case ResponseType::ok: {
        const auto b = random_text(rng, 40);
        r.body.assign(b.begin(), b.end());
        break;
      }
      case ResponseType::compile_error:
        r.frame = static_cast<std::uint16_t>(rng());
        r.offset = static_cast<std::uint32_t>(rng());
        r.message = random_text(rng, 60);
        break;
      case ResponseType::vm_error:
        r.code = static_cast<std::int16_t>(rng());
        r.task = static_cast<std::int16_t>(rng() % 8);
        break;
      case ResponseType::suspended:
        r.task = static_cast<std::int16_t>(rng() % 8);
        r.pc = static_cast<std::uint16_t>(rng());
        break;
      default:
        r.message = random_text(rng, 60);
    }
    for (std::size_t n = rng() % 3; n > 0; --n) r.output.push_back({static_cast<std::uint8_t>(rng() % 2), random_text(rng, 20)});
    REQUIRE(decode_response(decode_frame(encode_response(r))) == r);
  }
}

TEST_CASE("frame validation") {
  const std::uint8_t payload[] = {1, 2, 3};
  auto f = frame_bytes(0x09, payload);
  REQUIRE(f.size() == 4 + 3 + 1);
  CHECK(f[1] == 0x09);
  CHECK(f[2] == 3);
  CHECK(f[3] == 0);
  CHECK(f.back() == (0x09 ^ 3 ^ 0 ^ 1 ^ 2 ^ 3));
  CHECK(decode_frame(f).payload == std::vector<std::uint8_t>{1, 2, 3});

  auto bad = f;
  bad.back() ^= 1;
  CHECK_THROWS_AS(decode_frame(bad), Error);
  bad = f;
  bad[0] = 0;
  CHECK_THROWS_AS(decode_frame(bad), Error);
  CHECK_THROWS_AS(decode_frame(std::span(f).first(5)), Error);
  const std::vector<std::uint8_t> big(kMaxPayload + 1);
  CHECK_THROWS_AS(frame_bytes(0x01, big), Error);

  FrameReader reader;
  std::vector<std::uint8_t> stream = {0x00, 0x13, 0x37};
  stream.insert(stream.end(), bad.begin(), bad.end());
  bad = f;
  bad.back() ^= 0x40;
  stream.insert(stream.end(), bad.begin(), bad.end());
  stream.insert(stream.end(), f.begin(), f.end());
  for (const auto b : stream) reader.feed(std::span(&b, 1));
  bool corrupt = false;
  CHECK_FALSE(reader.next(&corrupt));
  CHECK(corrupt);
  auto ok = reader.next(&corrupt);
  REQUIRE(ok);
  CHECK(ok->type == 0x09);
  CHECK(ok->payload.size() == 3);
  CHECK_FALSE(reader.next());
}

TEST_CASE("in-process gate") {
  Vm vm;
  CallGate gate(vm);
  Request c;
  c.type = RequestType::compile;
  c.text = "1 2 + .";
  Response r = gate.vmsys(c);
  REQUIRE(r.type == ResponseType::ok);
  const auto body = parse_compile_body(r.body);
  CHECK(body.frame > 0);

  Request s;
  s.type = RequestType::spawn;
  s.frame = body.frame;
  r = gate.vmsys(s);
  CHECK(r.type == ResponseType::ok);
  Request run;
  run.type = RequestType::run;
  run.frame = body.frame;
  r = gate.vmsys(run);
  CHECK(r.type == ResponseType::ok);
  CHECK(r.text(0) == "3 ");

  c.text = "1 2 frob";
  r = gate.vmsys(c);
  CHECK(r.type == ResponseType::compile_error);
  CHECK(r.offset == 4);

  Request e;
  e.type = RequestType::exec;
  e.text = "1 0 /";
  r = gate.vmsys(e);
  CHECK(r.type == ResponseType::vm_error);
  CHECK(r.code == static_cast<std::int16_t>(ExceptionCode::divbyzero));

  e.text = "10 sleep 5 .";
  e.max_slices = 1;
  r = gate.vmsys(e);
  CHECK(r.type == ResponseType::suspended);

  Request st;
  st.type = RequestType::status;
  r = gate.vmsys(st);
  REQUIRE(r.type == ResponseType::ok);
  CHECK(parse_status_body(r.body).live_tasks == 1);

  Request dr;
  dr.type = RequestType::dios_read;
  dr.name = "missing";
  CHECK(gate.vmsys(dr).type == ResponseType::error);
}

TEST_CASE("host data through the gate") {
  Vm vm;
  std::int16_t buf[4] = {5, 6, 7, 8};
  vm.ios().dios_add("buf", buf, 4, 2);
  CallGate gate(vm);
  Request w;
  w.type = RequestType::dios_write;
  w.name = "buf";
  w.index = 2;
  w.value = -3;
  CHECK(gate.vmsys(w).type == ResponseType::ok);
  CHECK(buf[2] == -3);
  Request r;
  r.type = RequestType::dios_read;
  r.name = "buf";
  r.index = 3;
  const Response resp = gate.vmsys(r);
  REQUIRE(resp.type == ResponseType::ok);
  CHECK(parse_int_body(resp.body) == 8);
  r.index = 4;
  CHECK(gate.vmsys(r).type == ResponseType::error);
}

TEST_CASE("requests are rejected while the VM is busy") {
  Vm vm;
  CallGate gate(vm);
  ResponseType inner = ResponseType::ok;
  vm.ios().fios_add("reenter", [&](IosCall&) {
    Request s;
    s.type = RequestType::status;
    inner = gate.vmsys(s).type;
    return 0;
  }, 0, 2, 0);
  Request e;
  e.type = RequestType::exec;
  e.text = "reenter";
  CHECK(gate.vmsys(e).type == ResponseType::ok);
  CHECK(inner == ResponseType::error);
}

TEST_CASE("checkpoint and restore requests") {
  Vm vm;
  CallGate gate(vm);
  Request c;
  c.type = RequestType::exec;
  c.text = ": sq dup * ; export sq";
  REQUIRE(gate.vmsys(c).type == ResponseType::ok);
  Request cp;
  cp.type = RequestType::checkpoint;
  const Response saved = gate.vmsys(cp);
  REQUIRE(saved.type == ResponseType::ok);

  Vm other;
  CallGate g2(other);
  Request rs;
  rs.type = RequestType::restore;
  rs.blob = saved.body;
  CHECK(g2.vmsys(rs).type == ResponseType::ok);
  c.text = "9 sq .";
  CHECK(g2.vmsys(c).text(0) == "81 ");

  rs.blob[rs.blob.size() / 2] ^= 0xFF;
  CHECK(g2.vmsys(rs).type == ResponseType::error);
}

TEST_CASE("message gate matches the in-process gate") {
  std::mt19937_64 rng(53);
  for (int round = 0; round < 40; ++round) {
    Vm va, vb;
    CallGate direct(va);
    MessageGate msg(vb, [](std::vector<std::uint8_t>) {});
    GateClient client([&](std::span<const std::uint8_t> f) { return msg.handle(f); });
    for (int k = 0; k < 12; ++k) {
      Request r;
      switch (rng() % 5) {
        case 0:
          r.type = RequestType::exec;
          r.text = testkit::random_program(rng, {10, 8, 5, true, true, true, true});
          r.max_slices = static_cast<std::uint32_t>(rng() % 50);
          break;
        case 1:
          r.type = RequestType::compile;
          r.text = rng() % 2 ? "1 2 +" : "nope nope";
          break;
        case 2:
          r.type = RequestType::run;
          r.max_slices = static_cast<std::uint32_t>(1 + rng() % 20);
          break;
        case 3:
          r.type = RequestType::status;
          break;
        default:
          r.type = RequestType::spawn;
          r.frame = static_cast<std::uint16_t>(1 + rng() % 4);
      }
      const Response a = direct.vmsys(r);
      const Response b = client.call(r);
      REQUIRE(a == b);
    }
  }
}

TEST_CASE("corrupted frames get a NAK") {
  Vm vm;
  std::vector<std::vector<std::uint8_t>> sent;
  MessageGate msg(vm, [&](std::vector<std::uint8_t> f) { sent.push_back(std::move(f)); });
  Request st;
  st.type = RequestType::status;
  auto f = encode_request(st);
  f.back() ^= 0x5A;
  const auto reply = msg.handle(f);
  REQUIRE(reply.size() >= 5);
  CHECK(reply[1] == kNak);

  GateClient client([&](std::span<const std::uint8_t>) { return reply; });
  CHECK_THROWS_AS(client.call(st), Error);

  // Frames submitted from another thread are applied by pump().
  std::thread producer([&] { msg.submit(encode_request(st)); });
  producer.join();
  CHECK(msg.wait_for_input(100));
  CHECK(msg.pump() == 1);
  REQUIRE(sent.size() == 1);
  CHECK(decode_response(decode_frame(sent[0])).type == ResponseType::ok);
}

TEST_CASE("script driver") {
  Vm va, vb;
  CallGate direct(va);
  MessageGate msg(vb, [](std::vector<std::uint8_t>) {});
  GateClient client([&](std::span<const std::uint8_t> f) { return msg.handle(f); });
  const auto a = run_script([&](const Request& r) { return direct.vmsys(r); }, "3 0 do i . 5 sleep loop 7 out", 2);
  const auto b = run_script([&](const Request& r) { return client.call(r); }, "3 0 do i . 5 sleep loop 7 out", 2);
  CHECK(a.exit_code == 0);
  CHECK(a.console == "0 1 2 ");
  CHECK(a.stream == "7\n");
  CHECK(a.transcript == b.transcript);
  CHECK(a.transcript.size() > 3);

  const auto bad = run_script([&](const Request& r) { return direct.vmsys(r); }, "1 frob");
  CHECK(bad.exit_code == 1);
  const auto fault = run_script([&](const Request& r) { return direct.vmsys(r); }, "drop");
  CHECK(fault.exit_code == 2);
}
