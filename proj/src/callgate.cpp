#include "rexa/callgate.hpp"

#include <chrono>

#include "rexa/checkpoint.hpp"
#include "rexa/error.hpp"

namespace rexa {

namespace {

std::span<const std::uint8_t> as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

std::string rest_as_text(ByteReader& r) {
  const auto b = r.raw(r.remaining());
  return {b.begin(), b.end()};
}

void put_chunks(ByteWriter& w, const std::vector<OutputChunk>& chunks) {
  for (const auto& c : chunks) {
    if (c.text.size() > 0xFFFF) throw Error("output chunk too long");
    w.u8(c.channel);
    w.u16(static_cast<std::uint16_t>(c.text.size()));
    w.raw(as_bytes(c.text));
  }
}

std::vector<OutputChunk> get_chunks(ByteReader& r) {
  std::vector<OutputChunk> out;
  while (!r.done()) {
    OutputChunk c;
    c.channel = r.u8();
    const auto n = r.u16();
    const auto b = r.raw(n);
    c.text.assign(b.begin(), b.end());
    out.push_back(std::move(c));
  }
  return out;
}

bool valid_request_type(std::uint8_t t) { return t >= 0x01 && t <= 0x0A; }

bool valid_response_type(std::uint8_t t) { return (t >= 0x81 && t <= 0x85) || t == kNak; }

Response error_response(std::string msg) {
  Response r;
  r.type = ResponseType::error;
  r.message = std::move(msg);
  return r;
}

}  // namespace

std::string Response::text(std::uint8_t channel) const {
  std::string s;
  for (const auto& c : output)
    if (c.channel == channel) s += c.text;
  return s;
}

CompileBody parse_compile_body(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  CompileBody b;
  b.frame = r.u16();
  b.code_bytes = r.u16();
  return b;
}

RunBody parse_run_body(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  RunBody b;
  b.slices = r.u32();
  b.steps = r.u64();
  return b;
}

StatusBody parse_status_body(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  StatusBody b;
  b.now_us = r.u64();
  b.live_tasks = r.u8();
  b.frames = r.u16();
  b.cs_used = r.u32();
  b.dict_size = r.u16();
  b.total_steps = r.u64();
  b.mask = r.u32();
  return b;
}

std::int32_t parse_int_body(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  return r.i32();
}

// ---------------------------------------------------------------------------
// Codec

std::vector<std::uint8_t> frame_bytes(std::uint8_t type, std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) throw Error("message payload of " + std::to_string(payload.size()) + " bytes is too long");
  std::vector<std::uint8_t> out;
  out.reserve(payload.size() + 5);
  out.push_back(kFrameSync);
  out.push_back(type);
  out.push_back(static_cast<std::uint8_t>(payload.size()));
  out.push_back(static_cast<std::uint8_t>(payload.size() >> 8));
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint8_t x = 0;
  for (std::size_t i = 1; i < out.size(); ++i) x ^= out[i];
  out.push_back(x);
  return out;
}

std::vector<std::uint8_t> encode_request(const Request& r) {
  ByteWriter w;
  switch (r.type) {
    case RequestType::compile:
      w.raw(as_bytes(r.text));
      break;
    case RequestType::run:
      w.u16(r.frame);
      w.u32(r.max_slices);
      break;
    case RequestType::spawn:
      w.u16(r.frame);
      w.i16(r.priority);
      w.u32(r.deadline_us);
      break;
    case RequestType::dios_read:
      w.u16(r.index);
      w.raw(as_bytes(r.name));
      break;
    case RequestType::dios_write:
      w.u16(r.index);
      w.i32(r.value);
      w.raw(as_bytes(r.name));
      break;
    case RequestType::install_callback:
      w.u8(r.mask);
      break;
    case RequestType::checkpoint:
    case RequestType::status:
      break;
    case RequestType::restore:
      w.raw(r.blob);
      break;
    case RequestType::exec:
      w.i16(r.priority);
      w.u32(r.deadline_us);
      w.u32(r.max_slices);
      w.raw(as_bytes(r.text));
      break;
  }
  return frame_bytes(static_cast<std::uint8_t>(r.type), w.data());
}

std::vector<std::uint8_t> encode_response(const Response& r) {
  ByteWriter w;
  switch (r.type) {
    case ResponseType::ok:
      if (r.body.size() > 0xFFFF) throw Error("response body too long");
      w.u16(static_cast<std::uint16_t>(r.body.size()));
      w.raw(r.body);
      break;
    case ResponseType::compile_error:
      w.u16(r.frame);
      w.u32(r.offset);
      w.u16(static_cast<std::uint16_t>(r.message.size()));
      w.raw(as_bytes(r.message));
      break;
    case ResponseType::vm_error:
      w.i16(r.code);
      w.i16(r.task);
      break;
    case ResponseType::suspended:
      w.u16(r.pc);
      w.i16(r.task);
      break;
    case ResponseType::error:
      w.u16(static_cast<std::uint16_t>(r.message.size()));
      w.raw(as_bytes(r.message));
      break;
    case ResponseType::nak:
      return frame_bytes(kNak, {});
  }
  put_chunks(w, r.output);
  return frame_bytes(static_cast<std::uint8_t>(r.type), w.data());
}

RawFrame decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || bytes[0] != kFrameSync) throw Error("message frame: bad sync");
  const std::size_t len = bytes[2] | (bytes[3] << 8);
  if (bytes.size() != len + 5) throw Error("message frame: length mismatch");
  std::uint8_t x = 0;
  for (std::size_t i = 1; i + 1 < bytes.size(); ++i) x ^= bytes[i];
  if (x != bytes.back()) throw Error("message frame: checksum mismatch");
  return {bytes[1], {bytes.begin() + 4, bytes.end() - 1}};
}

Request decode_request(const RawFrame& f) {
  if (!valid_request_type(f.type)) throw Error("unknown request type " + std::to_string(f.type));
  Request r;
  r.type = static_cast<RequestType>(f.type);
  ByteReader in(f.payload);
  try {
    switch (r.type) {
      case RequestType::compile:
        r.text = rest_as_text(in);
        break;
      case RequestType::run:
        r.frame = in.u16();
        r.max_slices = in.u32();
        break;
      case RequestType::spawn:
        r.frame = in.u16();
        r.priority = in.i16();
        r.deadline_us = in.u32();
        break;
      case RequestType::dios_read:
        r.index = in.u16();
        r.name = rest_as_text(in);
        break;
      case RequestType::dios_write:
        r.index = in.u16();
        r.value = in.i32();
        r.name = rest_as_text(in);
        break;
      case RequestType::install_callback:
        r.mask = in.u8();
        break;
      case RequestType::checkpoint:
      case RequestType::status:
        break;
      case RequestType::restore: {
        const auto b = in.raw(in.remaining());
        r.blob.assign(b.begin(), b.end());
        break;
      }
      case RequestType::exec:
        r.priority = in.i16();
        r.deadline_us = in.u32();
        r.max_slices = in.u32();
        r.text = rest_as_text(in);
        break;
    }
  } catch (const CheckpointError&) {
    throw Error("truncated request payload");
  }
  if (!in.done()) throw Error("trailing bytes in request payload");
  return r;
}

Response decode_response(const RawFrame& f) {
  if (!valid_response_type(f.type)) throw Error("unknown response type " + std::to_string(f.type));
  Response r;
  r.type = static_cast<ResponseType>(f.type);
  ByteReader in(f.payload);
  try {
    switch (r.type) {
      case ResponseType::ok: {
        const auto n = in.u16();
        const auto b = in.raw(n);
        r.body.assign(b.begin(), b.end());
        break;
      }
      case ResponseType::compile_error: {
        r.frame = in.u16();
        r.offset = in.u32();
        const auto b = in.raw(in.u16());
        r.message.assign(b.begin(), b.end());
        break;
      }
      case ResponseType::vm_error:
        r.code = in.i16();
        r.task = in.i16();
        break;
      case ResponseType::suspended:
        r.pc = in.u16();
        r.task = in.i16();
        break;
      case ResponseType::error: {
        const auto b = in.raw(in.u16());
        r.message.assign(b.begin(), b.end());
        break;
      }
      case ResponseType::nak:
        return r;
    }
    r.output = get_chunks(in);
  } catch (const CheckpointError&) {
    throw Error("truncated response payload");
  }
  return r;
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

std::optional<RawFrame> FrameReader::next(bool* bad_checksum) {
  if (bad_checksum) *bad_checksum = false;
  while (!buf_.empty() && buf_.front() != kFrameSync) buf_.pop_front();
  if (buf_.size() < 5) return std::nullopt;
  const std::size_t len = buf_[2] | (buf_[3] << 8);
  if (buf_.size() < len + 5) return std::nullopt;
  std::uint8_t x = 0;
  for (std::size_t i = 1; i < len + 4; ++i) x ^= buf_[i];
  RawFrame f;
  f.type = buf_[1];
  const bool good = x == buf_[len + 4];
  if (good) f.payload.assign(buf_.begin() + 4, buf_.begin() + 4 + static_cast<std::ptrdiff_t>(len));
  buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(len + 5));
  if (!good) {
    if (bad_checksum) *bad_checksum = true;
    return std::nullopt;
  }
  return f;
}

// ---------------------------------------------------------------------------
// CallGate

CallGate::CallGate(Vm& vm) : vm_(vm) {
  vm_.set_output([this](std::uint8_t ch, std::string_view text) {
    if (tap_) tap_(ch, text);
    if (ch < 8 && !(mask_ & (1u << ch))) return;
    if (!pending_.empty() && pending_.back().channel == ch && pending_.back().text.size() + text.size() <= 0xFFFF)
      pending_.back().text.append(text);
    else
      pending_.push_back({ch, std::string(text)});
  });
}

CallGate::~CallGate() { vm_.set_output(nullptr); }

Response CallGate::vmsys(const Request& req) {
  if (busy_ || vm_.in_slice()) return error_response("busy");
  busy_ = true;
  pending_.clear();
  Response r;
  try {
    r = dispatch(req);
  } catch (const CompileError& e) {
    r = Response{};
    r.type = ResponseType::compile_error;
    r.frame = e.frame();
    r.offset = static_cast<std::uint32_t>(e.offset());
    r.message = e.message();
  } catch (const Error& e) {
    r = error_response(e.what());
  }
  r.output = std::move(pending_);
  pending_.clear();
  busy_ = false;
  return r;
}

Response CallGate::run_response(const RunOutcome& o, std::optional<std::uint16_t> frame) {
  Response r;
  if (o.error) {
    r.type = ResponseType::vm_error;
    r.code = o.error;
    r.task = static_cast<std::int16_t>(o.error_task);
    return r;
  }
  if (o.status != RunStatus::done) {
    r.type = ResponseType::suspended;
    for (const Task& t : vm_.tasks()) {
      if (t.live() && (!frame || t.frame == *frame)) {
        r.task = static_cast<std::int16_t>(t.id);
        r.pc = t.resume_pc();
        break;
      }
    }
    return r;
  }
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(o.slices));
  w.u64(o.steps);
  if (frame) w.u16(*frame);
  r.body = w.take();
  return r;
}

Response CallGate::dispatch(const Request& req) {
  const std::size_t budget =
      req.max_slices ? req.max_slices : std::numeric_limits<std::size_t>::max();
  Response r;
  ByteWriter w;
  switch (req.type) {
    case RequestType::compile: {
      const CompileResult c = vm_.compile(req.text);
      w.u16(c.frame);
      w.u16(static_cast<std::uint16_t>(c.code_end - c.start));
      break;
    }
    case RequestType::run: {
      const RunOutcome o = req.frame ? vm_.run_frame(req.frame, budget) : vm_.run(budget);
      return run_response(o, req.frame ? std::optional<std::uint16_t>(req.frame) : std::nullopt);
    }
    case RequestType::spawn:
      if (!vm_.cs().find(req.frame)) return error_response("no frame " + std::to_string(req.frame));
      w.i32(vm_.spawn(req.frame, req.priority, req.deadline_us));
      break;
    case RequestType::dios_read:
    case RequestType::dios_write: {
      const auto idx = vm_.ios().find_dios(req.name);
      if (!idx) return error_response("no DIOS entry named '" + req.name + "'");
      try {
        if (req.type == RequestType::dios_read)
          w.i32(vm_.ios().dios_read(*idx, req.index));
        else
          vm_.ios().dios_write(*idx, req.index, req.value);
      } catch (const VmFault&) {
        return error_response("DIOS index out of range");
      }
      break;
    }
    case RequestType::install_callback:
      mask_ = req.mask;
      break;
    case RequestType::checkpoint: {
      const auto blob = vm_.save();
      w.raw(blob);
      break;
    }
    case RequestType::restore:
      vm_.restore(req.blob);
      break;
    case RequestType::status: {
      const auto m = vm_.mask();
      w.u64(vm_.now_us());
      w.u8(static_cast<std::uint8_t>(vm_.live_tasks()));
      w.u16(static_cast<std::uint16_t>(vm_.cs().frames().size()));
      w.u32(static_cast<std::uint32_t>(vm_.cs().used_bytes()));
      w.u16(static_cast<std::uint16_t>(vm_.dict().size()));
      w.u64(vm_.total_steps());
      w.u32(m.bits());
      break;
    }
    case RequestType::exec: {
      const CompileResult c = vm_.compile(req.text);
      vm_.spawn(c.frame, req.priority, req.deadline_us);
      return run_response(vm_.run_frame(c.frame, budget), c.frame);
    }
  }
  r.body = w.take();
  return r;
}

// ---------------------------------------------------------------------------
// MessageGate

MessageGate::MessageGate(Vm& vm, Sink sink) : gate_(vm), sink_(std::move(sink)) {}

void MessageGate::submit(std::span<const std::uint8_t> bytes) {
  {
    std::lock_guard lock(mu_);
    reader_.feed(bytes);
  }
  cv_.notify_all();
}

bool MessageGate::wait_for_input(int timeout_ms) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms), [this] { return reader_.buffered() > 0; });
}

std::vector<std::uint8_t> MessageGate::process(const RawFrame& f) {
  Response r;
  try {
    r = gate_.vmsys(decode_request(f));
  } catch (const Error& e) {
    r = error_response(e.what());
  }
  try {
    return encode_response(r);
  } catch (const Error& e) {
    return encode_response(error_response(e.what()));
  }
}

std::size_t MessageGate::pump() {
  std::size_t handled = 0;
  for (;;) {
    std::optional<RawFrame> f;
    bool bad = false;
    {
      std::lock_guard lock(mu_);
      f = reader_.next(&bad);
    }
    if (bad) {
      ++handled;
      if (sink_) sink_(frame_bytes(kNak, {}));
      continue;
    }
    if (!f) return handled;
    ++handled;
    auto out = process(*f);
    if (sink_) sink_(std::move(out));
  }
}

std::vector<std::uint8_t> MessageGate::handle(std::span<const std::uint8_t> frame) {
  RawFrame f;
  try {
    f = decode_frame(frame);
  } catch (const Error&) {
    return frame_bytes(kNak, {});
  }
  return process(f);
}

Response GateClient::call(const Request& r) {
  const auto reply = transport_(encode_request(r));
  const Response resp = decode_response(decode_frame(reply));
  if (resp.type == ResponseType::nak) throw Error("request was not acknowledged (NAK)");
  return resp;
}

}  // namespace rexa

namespace rexa {

ScriptResult run_script(const GateCall& call, std::string_view source, std::uint32_t slices_per_request) {
  ScriptResult res;
  auto send = [&](const Request& req) {
    Response r = call(req);
    res.console += r.text(0);
    res.stream += r.text(1);
    res.transcript.emplace_back(req, r);
    return r;
  };
  auto fail = [&](int code, std::string msg) {
    res.exit_code = code;
    res.error = std::move(msg);
    return res;
  };

  Request req;
  req.type = RequestType::compile;
  req.text = std::string(source);
  Response r = send(req);
  if (r.type == ResponseType::compile_error)
    return fail(1, "compile error at offset " + std::to_string(r.offset) + ": " + r.message);
  if (r.type != ResponseType::ok) return fail(2, r.message);
  res.frame = parse_compile_body(r.body).frame;

  req = Request{};
  req.type = RequestType::spawn;
  req.frame = res.frame;
  r = send(req);
  if (r.type != ResponseType::ok) return fail(2, r.message);

  std::optional<StatusBody> last;
  for (;;) {
    req = Request{};
    req.type = RequestType::run;
    req.frame = res.frame;
    req.max_slices = slices_per_request;
    r = send(req);
    if (r.type == ResponseType::ok) return res;
    if (r.type == ResponseType::vm_error)
      return fail(2, "uncaught exception " + std::string(exception_name(r.code)) + " (" + std::to_string(r.code) +
                         ") in task " + std::to_string(r.task));
    if (r.type != ResponseType::suspended) return fail(2, r.message);
    req = Request{};
    req.type = RequestType::status;
    const Response st = send(req);
    if (st.type != ResponseType::ok) return fail(2, st.message);
    const StatusBody now = parse_status_body(st.body);
    if (last && last->now_us == now.now_us && last->total_steps == now.total_steps)
      return fail(2, "program blocked (task " + std::to_string(r.task) + " waiting at " + std::to_string(r.pc) + ")");
    last = now;
  }
}

}  // namespace rexa
