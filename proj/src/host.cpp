#include "rexa/host.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rexa/checkpoint.hpp"
#include "rexa/error.hpp"

namespace rexa::host {

namespace {

Cell clamp_cell(double v) { return static_cast<Cell>(std::clamp(std::lround(v), -32768L, 32767L)); }

void put_cells(ByteWriter& w, std::span<const Cell> cells) {
  w.u32(static_cast<std::uint32_t>(cells.size()));
  for (Cell c : cells) w.i16(c);
}

std::vector<Cell> get_cells(ByteReader& r) {
  std::vector<Cell> v(r.u32());
  for (auto& c : v) c = r.i16();
  return v;
}

}  // namespace

double hamming(std::uint32_t k, std::uint32_t n) {
  if (n <= 1) return 1.0;
  return 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * k / (n - 1));
}

// ---------------------------------------------------------------------------
// SignalSource

SignalSource::SignalSource(SignalConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {}

void SignalSource::start(std::uint64_t acquisition) { rng_.seed(cfg_.seed ^ (acquisition * 0x9E3779B97F4A7C15ull)); }

double SignalSource::ideal(std::uint32_t n, double rate_hz) const {
  if (const auto it = cfg_.peaks.find(n); it != cfg_.peaks.end()) return it->second;
  const double phase = cfg_.freq_hz * n / rate_hz;
  switch (cfg_.kind) {
    case SignalKind::constant:
      return cfg_.offset;
    case SignalKind::sine_burst:
      if (n >= cfg_.burst) return cfg_.offset;
      return cfg_.offset + cfg_.amplitude * hamming(n, cfg_.burst) * std::sin(2.0 * std::numbers::pi * phase);
    case SignalKind::square:
      return cfg_.offset + (phase - std::floor(phase) < 0.5 ? cfg_.amplitude : -cfg_.amplitude);
    case SignalKind::trace:
      return cfg_.trace.empty() ? cfg_.offset : cfg_.offset + cfg_.trace[n % cfg_.trace.size()];
  }
  return 0;
}

Cell SignalSource::sample(std::uint32_t n, double rate_hz) {
  if (const auto it = cfg_.peaks.find(n); it != cfg_.peaks.end()) return it->second;
  double v = ideal(n, rate_hz);
  if (cfg_.noise > 0) v += std::uniform_real_distribution<double>(-cfg_.noise, cfg_.noise)(rng_);
  return clamp_cell(v);
}

std::vector<Cell> SignalSource::load_trace(const std::string& text) {
  std::vector<Cell> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        out.push_back(clamp_cell(v));
      } catch (const std::exception&) {
        if (!out.empty()) throw ConfigError("malformed sample in signal trace: " + tok);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PowerCycle

PowerTrace PowerCycle::trace() const {
  std::vector<std::pair<std::uint64_t, double>> pts;
  for (const auto& iv : intervals) {
    pts.emplace_back(iv.start_us, iv.power_uW);
    pts.emplace_back(iv.end_us, 0.0);
  }
  return PowerTrace(std::move(pts));
}

PowerCycle PowerCycle::from_csv(const std::string& text) {
  PowerCycle pc;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    PowerInterval iv;
    if (!(ls >> iv.start_us >> iv.end_us >> iv.power_uW)) {
      if (pc.intervals.empty()) continue;
      throw ConfigError("malformed power cycle line: " + line);
    }
    if (iv.end_us < iv.start_us || iv.power_uW < 0) throw ConfigError("invalid power interval: " + line);
    pc.intervals.push_back(iv);
  }
  return pc;
}

// ---------------------------------------------------------------------------
// NodeConfig

NodeConfig NodeConfig::from_json(const std::string& text) {
  using nlohmann::json;
  NodeConfig c;
  try {
    const json j = json::parse(text);
    c.id = j.value("id", c.id);
    if (j.contains("vm")) {
      const json& v = j["vm"];
      c.vm.cs_size = v.value("cs", c.vm.cs_size);
      c.vm.ds_size = v.value("ds", c.vm.ds_size);
      c.vm.rs_size = v.value("rs", c.vm.rs_size);
      c.vm.fs_size = v.value("fs", c.vm.fs_size);
      c.vm.max_tasks = v.value("tasks", c.vm.max_tasks);
      c.vm.dict_capacity = v.value("dict", c.vm.dict_capacity);
      c.vm.merge_fs = v.value("merge_fs", c.vm.merge_fs);
      c.vm.steps = v.value("steps", c.vm.steps);
      c.vm.longest_us = v.value("longest_us", c.vm.longest_us);
      c.vm.t1_ns = v.value("t1_ns", c.vm.t1_ns);
      c.vm.preempt = v.value("preempt", c.vm.preempt);
      const std::string lookup = v.value("lookup", std::string("pht"));
      if (lookup == "pht")
        c.vm.lookup = isa::LookupMode::pht;
      else if (lookup == "lst")
        c.vm.lookup = isa::LookupMode::lst;
      else
        throw ConfigError("vm.lookup must be \"pht\" or \"lst\"");
      const std::string clock = v.value("clock", std::string("simulated"));
      if (clock == "simulated")
        c.vm.clock = ClockMode::simulated;
      else if (clock == "wall")
        c.vm.clock = ClockMode::wall;
      else
        throw ConfigError("vm.clock must be \"simulated\" or \"wall\"");
    }
    c.buffer_cells = j.value("buffer_cells", c.buffer_cells);
    c.ring_start = j.value("ring_start", c.ring_start);
    c.wave_cells = j.value("wave_cells", c.wave_cells);
    if (j.contains("trigger")) {
      const json& t = j["trigger"];
      c.trigger_free = t.value("free", c.trigger_free);
      c.trigger_single = t.value("single", c.trigger_single);
      c.trigger_threshold = t.value("threshold", c.trigger_threshold);
    }
    c.dac_burst_cycles = j.value("dac_burst_cycles", c.dac_burst_cycles);
    c.dsp_library = j.value("dsp_library", c.dsp_library);
    if (j.contains("signal")) {
      const json& s = j["signal"];
      const std::string kind = s.value("kind", std::string("sine_burst"));
      if (kind == "constant")
        c.signal.kind = SignalKind::constant;
      else if (kind == "sine_burst")
        c.signal.kind = SignalKind::sine_burst;
      else if (kind == "square")
        c.signal.kind = SignalKind::square;
      else if (kind == "trace")
        c.signal.kind = SignalKind::trace;
      else
        throw ConfigError("unknown signal kind '" + kind + "'");
      c.signal.amplitude = s.value("amplitude", c.signal.amplitude);
      c.signal.offset = s.value("offset", c.signal.offset);
      c.signal.freq_hz = s.value("freq_hz", c.signal.freq_hz);
      c.signal.burst = s.value("burst", c.signal.burst);
      c.signal.noise = s.value("noise", c.signal.noise);
      c.signal.seed = s.value("seed", c.signal.seed);
      if (s.contains("trace")) c.signal.trace = s["trace"].get<std::vector<Cell>>();
      if (s.contains("peaks"))
        for (const auto& p : s["peaks"]) c.signal.peaks[p.at(0).get<std::uint32_t>()] = p.at(1).get<Cell>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("node config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Node

Node::Node(NodeConfig cfg)
    : cfg_(std::move(cfg)), vm_(cfg_.vm, cfg_.isa ? *cfg_.isa : isa::Isa::default_isa()), source_(cfg_.signal), samples_(cfg_.buffer_cells), wave_(cfg_.wave_cells) {
  if (cfg_.buffer_cells == 0) throw ConfigError("sample buffer must hold at least one cell");
  if (cfg_.wave_cells == 0) throw ConfigError("wave table must hold at least one cell");
  vm_.set_host(this);
  vm_.set_hooks(this);
  register_ios();
  if (cfg_.dsp_library) register_dsp_library(vm_);
}

Node::~Node() {
  vm_.set_host(nullptr);
  vm_.set_hooks(nullptr);
}

void Node::register_ios() {
  IosTable& ios = vm_.ios();
  ios.dios_add("samples", samples_.data(), cfg_.buffer_cells, 2);
  ios.dios_add("sample", samples_.data(), cfg_.buffer_cells, 2);
  ios.dios_add("sample0", &sample0_, 1, 2);
  ios.dios_add("sampled", &sampled_, 1, 2);
  ios.dios_add("wave", wave_.data(), cfg_.wave_cells, 2);
  ios.fios_add("adc", [this](IosCall& c) { return adc_start(c); }, 5, 2, 0);
  ios.fios_add("dac", [this](IosCall& c) { return dac_start(c); }, 5, 2, 0);
  ios.fios_add(
      "milli", [](IosCall& c) { return static_cast<std::int32_t>(c.vm.now_us() / 1000); }, 0, 2, 4);
}

std::int32_t Node::adc_start(IosCall& c) {
  const auto mode = c.args[0];
  const auto depth_ks = c.args[1];
  const auto gain = c.args[2];
  const auto freq = c.args[3];
  const auto device = c.args[4];
  const std::int64_t depth = static_cast<std::int64_t>(depth_ks) * 1024;
  if (device != 0 || adc_.active || depth <= 0 || depth > cfg_.buffer_cells || freq <= 0)
    throw VmFault(ExceptionCode::io);
  if (mode != cfg_.trigger_free && mode != cfg_.trigger_single) throw VmFault(ExceptionCode::io);

  source_.start(++acquisitions_);
  adc_ = Adc{};
  adc_.active = true;
  adc_.depth = static_cast<std::uint32_t>(depth);
  adc_.gain = gain >= 1 ? gain : 1;
  adc_.freq_ksps = freq;
  sampled_ = 0;
  const double rate = freq * 1000.0;
  if (mode == cfg_.trigger_single) {
    for (std::uint32_t n = 0; n < cfg_.trigger_search; ++n) {
      if (source_.ideal(n, rate) * adc_.gain >= cfg_.trigger_threshold) {
        adc_.triggered = true;
        adc_.trigger_at = n;
        break;
      }
    }
  } else {
    adc_.triggered = true;
  }
  if (adc_.triggered) {
    const std::uint64_t total = adc_.trigger_at + adc_.depth;
    adc_.done_us = c.vm.now_us() + (total * 1000 + static_cast<std::uint64_t>(freq) - 1) / static_cast<std::uint64_t>(freq);
  }
  return 0;
}

void Node::complete_adc() {
  const double rate = adc_.freq_ksps * 1000.0;
  const std::uint32_t start = cfg_.ring_start % adc_.depth;
  for (std::uint32_t k = 0; k < adc_.depth; ++k)
    samples_[(start + k) % adc_.depth] =
        clamp_cell(static_cast<double>(source_.sample(adc_.trigger_at + k, rate)) * adc_.gain);
  sample0_ = static_cast<Cell>(start);
  sampled_ = 1;
  adc_.active = false;
}

std::vector<Cell> Node::make_wave(std::int32_t wave) const {
  const std::size_t n = wave_.size();
  std::vector<Cell> t(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double x = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    switch (wave) {
      case 0:
        t[k] = wave_[k];
        break;
      case 1:
        t[k] = clamp_cell(1000.0 * std::sin(x));
        break;
      case 2:
        t[k] = clamp_cell(1000.0 * hamming(static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(n)) *
                          std::sin(x * cfg_.dac_burst_cycles));
        break;
      default:
        t[k] = k < n / 2 ? Cell{1000} : Cell{-1000};
        break;
    }
  }
  return t;
}

std::int32_t Node::dac_start(IosCall& c) {
  const auto wave = c.args[0];
  const auto interval = c.args[1];
  const auto ampl = c.args[2];
  const auto freq = c.args[3];
  const auto device = c.args[4];
  if (device != 0 || wave < 0 || wave > 3 || interval < 0 || freq <= 0) throw VmFault(ExceptionCode::io);
  dac_ = Dac{};
  dac_.active = true;
  dac_.periodic = interval == 0;
  dac_.wave = wave;
  dac_.ampl = ampl;
  dac_.freq_ksps = freq;
  dac_.start_us = c.vm.now_us() + static_cast<std::uint64_t>(interval) * 1000;
  dac_.table = make_wave(wave);
  return 0;
}

void Node::update_devices(std::uint64_t now) {
  if (adc_.active && adc_.triggered && now >= adc_.done_us) complete_adc();
  if (dac_.active && now >= dac_.start_us) {
    const std::uint64_t f = static_cast<std::uint64_t>(dac_.freq_ksps);
    std::uint64_t due = (now - dac_.start_us) * f / 1000 + 1;
    if (!dac_.periodic) due = std::min<std::uint64_t>(due, dac_.table.size());
    for (std::uint64_t k = dac_.emitted; k < due && capture_.size() < cfg_.capture_limit; ++k) {
      const Cell v = clamp_cell(static_cast<double>(dac_.table[k % dac_.table.size()]) * dac_.ampl / 1000.0);
      capture_.push_back({dac_.start_us + k * 1000 / f, v});
    }
    dac_.emitted = std::max(dac_.emitted, due);
    if (!dac_.periodic && dac_.emitted >= dac_.table.size()) dac_.active = false;
  }
}

void Node::before_slice(Vm& vm) { update_devices(vm.now_us()); }

std::optional<std::uint64_t> Node::next_event_us(const Vm&) const {
  if (adc_.active && adc_.triggered) return adc_.done_us;
  return std::nullopt;
}

void Node::reboot() {
  vm_.reset();
  std::fill(samples_.begin(), samples_.end(), Cell{0});
  std::fill(wave_.begin(), wave_.end(), Cell{0});
  sample0_ = 0;
  sampled_ = 0;
  adc_ = Adc{};
  dac_ = Dac{};
  input_.clear();
}

std::vector<std::uint8_t> Node::save_host() const {
  ByteWriter w;
  w.u16(cfg_.buffer_cells);
  w.u16(cfg_.wave_cells);
  put_cells(w, samples_);
  put_cells(w, wave_);
  w.i16(sample0_);
  w.i16(sampled_);
  w.u8(adc_.active);
  w.u8(adc_.triggered);
  w.u32(adc_.depth);
  w.i32(adc_.gain);
  w.i32(adc_.freq_ksps);
  w.u64(adc_.done_us);
  w.u32(adc_.trigger_at);
  w.u8(dac_.active);
  w.u8(dac_.periodic);
  w.i32(dac_.wave);
  w.i32(dac_.ampl);
  w.i32(dac_.freq_ksps);
  w.u64(dac_.start_us);
  w.u64(dac_.emitted);
  put_cells(w, dac_.table);
  w.u32(static_cast<std::uint32_t>(input_.size()));
  for (Cell c : input_) w.i16(c);
  w.u64(acquisitions_);
  std::ostringstream rng;
  rng << source_.rng();
  w.str(rng.str());
  return w.take();
}

void Node::restore_host(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return;
  ByteReader r(bytes);
  if (r.u16() != cfg_.buffer_cells || r.u16() != cfg_.wave_cells)
    throw CheckpointError("checkpoint was taken on a node with different buffers");
  const auto samples = get_cells(r);
  const auto wave = get_cells(r);
  if (samples.size() != samples_.size() || wave.size() != wave_.size())
    throw CheckpointError("corrupt device section");
  Adc adc;
  Dac dac;
  const Cell s0 = r.i16();
  const Cell sd = r.i16();
  adc.active = r.u8() != 0;
  adc.triggered = r.u8() != 0;
  adc.depth = r.u32();
  adc.gain = r.i32();
  adc.freq_ksps = r.i32();
  adc.done_us = r.u64();
  adc.trigger_at = r.u32();
  dac.active = r.u8() != 0;
  dac.periodic = r.u8() != 0;
  dac.wave = r.i32();
  dac.ampl = r.i32();
  dac.freq_ksps = r.i32();
  dac.start_us = r.u64();
  dac.emitted = r.u64();
  dac.table = get_cells(r);
  std::deque<Cell> input(r.u32());
  for (auto& c : input) c = r.i16();
  const auto acquisitions = r.u64();
  std::istringstream rng(r.str());
  std::mt19937_64 engine;
  if (!(rng >> engine)) throw CheckpointError("corrupt signal generator state");
  if ((adc.active && (adc.depth == 0 || adc.freq_ksps <= 0)) || (dac.active && (dac.table.empty() || dac.freq_ksps <= 0)))
    throw CheckpointError("corrupt device state");

  std::copy(samples.begin(), samples.end(), samples_.begin());
  std::copy(wave.begin(), wave.end(), wave_.begin());
  sample0_ = s0;
  sampled_ = sd;
  adc_ = adc;
  dac_ = std::move(dac);
  input_ = std::move(input);
  acquisitions_ = acquisitions;
  source_.set_rng(engine);
}

bool Node::link_send(Cell dst, std::span<const Cell> values) {
  if (!net_ || !net_->has_link(cfg_.id, dst)) throw VmFault(ExceptionCode::io);
  // A message larger than the link buffer could never be accepted.
  if (values.size() > net_->capacity()) throw VmFault(ExceptionCode::io);
  return net_->send(cfg_.id, dst, values);
}

bool Node::link_can_send(Cell dst, std::size_t n) const { return net_ && net_->can_send(cfg_.id, dst, n); }

std::optional<Cell> Node::link_receive(Cell src) {
  if (!net_ || !net_->has_link(src, cfg_.id)) throw VmFault(ExceptionCode::io);
  return net_->receive(src, cfg_.id);
}

bool Node::link_can_receive(Cell src) const { return net_ && net_->can_receive(src, cfg_.id); }

std::optional<Cell> Node::input() {
  if (input_.empty()) return std::nullopt;
  const Cell v = input_.front();
  input_.pop_front();
  return v;
}

// ---------------------------------------------------------------------------
// Network

void Network::add_node(Node& n) {
  for (const Node* other : nodes_)
    if (other->id() == n.id()) throw ConfigError("duplicate node id " + std::to_string(n.id()));
  nodes_.push_back(&n);
  n.attach(this);
}

void Network::connect(int a, int b) {
  std::lock_guard lock(mu_);
  links_[{a, b}];
  links_[{b, a}];
}

void Network::star(int hub) {
  for (const Node* n : nodes_)
    if (n->id() != hub) connect(hub, n->id());
}

void Network::mesh() {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    for (std::size_t j = i + 1; j < nodes_.size(); ++j) connect(nodes_[i]->id(), nodes_[j]->id());
}

Network::Link* Network::find(int src, int dst) {
  const auto it = links_.find({src, dst});
  return it == links_.end() ? nullptr : &it->second;
}

const Network::Link* Network::find(int src, int dst) const {
  const auto it = links_.find({src, dst});
  return it == links_.end() ? nullptr : &it->second;
}

bool Network::has_link(int src, int dst) const {
  std::lock_guard lock(mu_);
  return find(src, dst) != nullptr;
}

bool Network::send(int src, int dst, std::span<const Cell> values) {
  std::lock_guard lock(mu_);
  Link* l = find(src, dst);
  if (!l || l->queue.size() + values.size() > capacity_) return false;
  for (Cell v : values) {
    l->queue.push_back(v);
    trace_.push_back({src, dst, v});
  }
  return true;
}

bool Network::can_send(int src, int dst, std::size_t n) const {
  std::lock_guard lock(mu_);
  const Link* l = find(src, dst);
  return l && l->queue.size() + n <= capacity_;
}

std::optional<Cell> Network::receive(int src, int dst) {
  std::lock_guard lock(mu_);
  Link* l = find(src, dst);
  if (!l || l->queue.empty()) return std::nullopt;
  const Cell v = l->queue.front();
  l->queue.pop_front();
  return v;
}

bool Network::can_receive(int src, int dst) const {
  std::lock_guard lock(mu_);
  const Link* l = find(src, dst);
  return l && !l->queue.empty();
}

std::vector<LinkEvent> Network::trace() const {
  std::lock_guard lock(mu_);
  return trace_;
}

std::size_t Network::run(std::size_t max_rounds) {
  for (std::size_t round = 0; round < max_rounds; ++round) {
    bool any_live = false;
    bool progressed = false;
    for (Node* n : nodes_) {
      if (n->vm().live_tasks() == 0) continue;
      any_live = true;
      if (n->vm().slice().task >= 0) progressed = true;
    }
    if (!any_live) return round;
    if (progressed) continue;
    bool advanced = false;
    for (Node* n : nodes_) {
      Vm& vm = n->vm();
      if (vm.live_tasks() == 0) continue;
      if (const auto t = vm.next_wakeup(); t && *t > vm.now_us()) {
        vm.set_clock(*t);
        advanced = true;
      } else if (t) {
        advanced = true;
      }
    }
    if (!advanced) return round;
  }
  return max_rounds;
}

bool Network::run_threaded(std::uint64_t max_slices_per_node) {
  const std::size_t n = nodes_.size();
  std::atomic<std::uint64_t> epoch{0};
  std::atomic<std::size_t> parked{0};
  std::vector<std::thread> workers;
  workers.reserve(n);
  for (Node* node : nodes_) {
    workers.emplace_back([&, node] {
      Vm& vm = node->vm();
      bool is_parked = false;
      std::uint64_t parked_epoch = 0;
      int stable = 0;
      for (std::uint64_t s = 0; s < max_slices_per_node; ++s) {
        if (vm.live_tasks() == 0) break;
        const SliceInfo si = vm.slice();
        if (si.task >= 0) {
          epoch.fetch_add(1);
          if (is_parked) {
            is_parked = false;
            parked.fetch_sub(1);
          }
          continue;
        }
        if (const auto t = vm.next_wakeup()) {
          vm.set_clock(std::max(*t, vm.now_us()));
          continue;
        }
        // Waiting on another node.
        if (!is_parked) {
          is_parked = true;
          parked.fetch_add(1);
          parked_epoch = epoch.load();
          stable = 0;
        } else if (epoch.load() != parked_epoch) {
          parked_epoch = epoch.load();
          stable = 0;
        } else if (parked.load() == n && ++stable > 1000) {
          break;  // every node waits on another: deadlock
        }
        std::this_thread::yield();
      }
      if (!is_parked) parked.fetch_add(1);
    });
  }
  for (auto& w : workers) w.join();
  return std::all_of(nodes_.begin(), nodes_.end(), [](Node* node) { return node->vm().live_tasks() == 0; });
}

// ---------------------------------------------------------------------------
// Powered execution

PoweredOutcome run_powered(Node& node, const PowerCycle& power, std::size_t max_slices) {
  Vm& vm = node.vm();
  const PowerTrace ps = power.trace();
  const double t1_us = vm.config().t1_ns / 1000.0;
  const double slice_max_uJ = power.drain_uW * vm.config().steps * t1_us * 1e-6;

  PoweredOutcome out;
  double E = std::min(power.initial_uJ, power.capacity_uJ);
  std::uint64_t t_last = vm.now_us();
  auto harvest_to = [&](std::uint64_t t) {
    if (t <= t_last) return;
    const double e = ps.integrate(t_last, t);
    const double take = std::min(e, power.capacity_uJ - E);
    E += take;
    out.harvested_uJ += take;
    out.wasted_uJ += e - take;
    t_last = t;
  };

  if (slice_max_uJ > power.capacity_uJ) {
    out.starved = true;
    out.run.status = RunStatus::blocked;
    out.energy_uJ = E;
    return out;
  }

  while (out.run.slices < max_slices) {
    if (vm.live_tasks() == 0) {
      out.run.status = RunStatus::done;
      break;
    }
    harvest_to(vm.now_us());
    if (E < slice_max_uJ) {
      const auto blob = vm.save();
      node.reboot();
      ++out.brownouts;
      // Charge until one full slice is affordable again.
      while (E < slice_max_uJ) {
        const double p = ps.at(t_last);
        const auto next = ps.next_change(t_last);
        if (p > 0) {
          const auto dt = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::ceil((slice_max_uJ - E) / p * 1e6)));
          harvest_to(next ? std::min(t_last + dt, *next) : t_last + dt);
        } else if (next) {
          harvest_to(*next);
        } else {
          break;
        }
      }
      const bool charged = E >= slice_max_uJ;
      vm.restore(blob);
      vm.set_clock(std::max(t_last, vm.now_us()));
      t_last = std::max(t_last, vm.now_us());
      if (!charged) {
        out.starved = true;
        out.run.status = RunStatus::blocked;
        break;
      }
      ++out.restores;
      continue;
    }
    const SliceInfo si = vm.slice();
    if (si.task < 0) {
      const auto next = vm.next_wakeup();
      if (!next) {
        out.run.status = RunStatus::blocked;
        break;
      }
      vm.set_clock(std::max(*next, vm.now_us()));
      continue;
    }
    ++out.run.slices;
    out.run.steps += si.steps;
    if (si.error && !out.run.error) {
      out.run.error = si.error;
      out.run.error_task = si.task;
    }
    const double cost = power.drain_uW * si.steps * t1_us * 1e-6;
    E -= cost;
    out.drained_uJ += cost;
  }
  if (out.run.slices >= max_slices && vm.live_tasks() > 0) out.run.status = RunStatus::budget;
  out.energy_uJ = E;
  return out;
}

}  // namespace rexa::host
