#pragma once

// Host control interface. CallGate::vmsys is the in-process entry point;
// the codec and MessageGate carry the same requests over a framed byte
// stream:
//
//   0xA5 | type u8 | length u16 LE | payload | xor(type, length, payload)
//
// Requests use types 0x01..0x0A, responses 0x81..0x85, and 0x15 is the NAK
// a receiver sends back for a frame with a bad checksum.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rexa/vm.hpp"

namespace rexa {

inline constexpr std::uint8_t kFrameSync = 0xA5;
inline constexpr std::uint8_t kNak = 0x15;
inline constexpr std::size_t kMaxPayload = 0xFFFF;

enum class RequestType : std::uint8_t {
  compile = 0x01,
  run = 0x02,
  spawn = 0x03,
  dios_read = 0x04,
  dios_write = 0x05,
  install_callback = 0x06,
  checkpoint = 0x07,
  restore = 0x08,
  status = 0x09,
  exec = 0x0A,  // compile + spawn + run the frame
};

enum class ResponseType : std::uint8_t {
  ok = 0x81,
  compile_error = 0x82,
  vm_error = 0x83,
  suspended = 0x84,
  error = 0x85,  // malformed or rejected request
  nak = kNak,
};

struct Request {
  RequestType type = RequestType::status;
  std::string text;             // compile, exec: program source
  std::uint16_t frame = 0;      // run (0 = all tasks), spawn
  std::uint32_t max_slices = 0; // run, exec (0 = unlimited)
  std::int16_t priority = 0;    // spawn, exec
  std::uint32_t deadline_us = 0;
  std::string name;             // dios_read/write
  std::uint16_t index = 0;
  std::int32_t value = 0;
  std::uint8_t mask = 0xFF;     // install_callback: channels forwarded
  std::vector<std::uint8_t> blob;  // restore

  bool operator==(const Request&) const = default;
};

struct OutputChunk {
  std::uint8_t channel = 0;
  std::string text;
  bool operator==(const OutputChunk&) const = default;
};

struct Response {
  ResponseType type = ResponseType::ok;
  std::vector<std::uint8_t> body;  // ok payload (see the *_body helpers)
  std::uint16_t frame = 0;         // compile_error
  std::uint32_t offset = 0;        // compile_error: byte offset in the source
  std::string message;             // compile_error, error
  std::int16_t code = 0;           // vm_error: exception code
  std::int16_t task = -1;          // vm_error, suspended
  std::uint16_t pc = 0;            // suspended: resume address
  std::vector<OutputChunk> output; // program output produced by the request

  bool operator==(const Response&) const = default;
  /// Output of one channel concatenated.
  std::string text(std::uint8_t channel) const;
};

/// Bodies of ok responses.
struct CompileBody {
  std::uint16_t frame = 0;
  std::uint16_t code_bytes = 0;
};
struct RunBody {
  std::uint32_t slices = 0;
  std::uint64_t steps = 0;
};
struct StatusBody {
  std::uint64_t now_us = 0;
  std::uint8_t live_tasks = 0;
  std::uint16_t frames = 0;
  std::uint32_t cs_used = 0;
  std::uint16_t dict_size = 0;
  std::uint64_t total_steps = 0;
  std::uint32_t mask = 0;
  bool operator==(const StatusBody&) const = default;
};
CompileBody parse_compile_body(std::span<const std::uint8_t> body);
RunBody parse_run_body(std::span<const std::uint8_t> body);
StatusBody parse_status_body(std::span<const std::uint8_t> body);
/// Task id from spawn/exec bodies, value from dios_read.
std::int32_t parse_int_body(std::span<const std::uint8_t> body);

// ---------------------------------------------------------------------------
// Wire codec

/// Wraps a payload into a frame. Throws Error when the payload is too long.
std::vector<std::uint8_t> frame_bytes(std::uint8_t type, std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> encode_request(const Request& r);
std::vector<std::uint8_t> encode_response(const Response& r);

struct RawFrame {
  std::uint8_t type = 0;
  std::vector<std::uint8_t> payload;
};

/// Incremental frame reassembly over an unreliable byte stream. Bytes before
/// a sync byte are skipped. A frame with a bad checksum is reported once
/// through `bad` and then discarded.
class FrameReader {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete frame, if any. Sets *bad_checksum when the frame at the
  /// head failed its checksum (the returned value is then nullopt).
  std::optional<RawFrame> next(bool* bad_checksum = nullptr);
  std::size_t buffered() const { return buf_.size(); }

 private:
  std::deque<std::uint8_t> buf_;
};

/// Decodes one complete frame. Throws Error on bad sync, length, type or
/// checksum.
RawFrame decode_frame(std::span<const std::uint8_t> bytes);
Request decode_request(const RawFrame& f);
Response decode_response(const RawFrame& f);

// ---------------------------------------------------------------------------
// Gates

/// In-process shared-state gate.
class CallGate {
 public:
  explicit CallGate(Vm& vm);
  ~CallGate();
  CallGate(const CallGate&) = delete;
  CallGate& operator=(const CallGate&) = delete;

  /// Every request yields exactly one response. Rejected while the VM is
  /// executing instructions (busy).
  Response vmsys(const Request& req);

  /// Receives all program output as it happens, independent of the
  /// per-response channel mask.
  void set_tap(OutputFn tap) { tap_ = std::move(tap); }
  Vm& vm() { return vm_; }

 private:
  Response dispatch(const Request& req);
  Response run_response(const RunOutcome& o, std::optional<std::uint16_t> frame);

  Vm& vm_;
  OutputFn tap_;
  std::uint8_t mask_ = 0xFF;
  std::vector<OutputChunk> pending_;
  bool busy_ = false;
};

/// Message-based gate. Frames may arrive from any thread through submit();
/// they are applied only when the owning thread calls pump() between
/// slices, and responses leave through the sink as encoded frames.
class MessageGate {
 public:
  using Sink = std::function<void(std::vector<std::uint8_t>)>;

  MessageGate(Vm& vm, Sink sink);

  void submit(std::span<const std::uint8_t> bytes);
  /// Processes every complete queued frame. Returns the number handled.
  std::size_t pump();
  /// Synchronous helper: one encoded request in, one encoded response out.
  std::vector<std::uint8_t> handle(std::span<const std::uint8_t> frame);
  /// Blocks until input is queued or `timeout_ms` passes.
  bool wait_for_input(int timeout_ms);

  CallGate& gate() { return gate_; }

 private:
  std::vector<std::uint8_t> process(const RawFrame& f);

  CallGate gate_;
  Sink sink_;
  std::mutex mu_;
  std::condition_variable cv_;
  FrameReader reader_;
};

/// Client side of the message protocol over an arbitrary transport that
/// delivers a request frame and returns the response bytes.
class GateClient {
 public:
  using Transport = std::function<std::vector<std::uint8_t>(std::span<const std::uint8_t>)>;
  explicit GateClient(Transport t) : transport_(std::move(t)) {}
  /// Sends and decodes; throws Error on a NAK or undecodable reply.
  Response call(const Request& r);

 private:
  Transport transport_;
};

/// Drives one program through a gate: compile, spawn, then run requests
/// until the frame finishes, fails or stops making progress.
struct ScriptResult {
  int exit_code = 0;  // 0 done, 1 compile error, 2 runtime error or blocked
  std::uint16_t frame = 0;
  std::string console;  // channel 0
  std::string stream;   // channel 1 (`out`)
  std::string error;
  std::vector<std::pair<Request, Response>> transcript;
};

using GateCall = std::function<Response(const Request&)>;
ScriptResult run_script(const GateCall& call, std::string_view source, std::uint32_t slices_per_request = 1024);

}  // namespace rexa
