#pragma once

// Simulated sensor node: signal sources, ADC/DAC devices behind FIOS/DIOS,
// point-to-point links between nodes, and a power-cycle model that takes a
// checkpoint before the storage runs dry and restores it when the field
// comes back.

#include <atomic>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rexa/scheduler.hpp"
#include "rexa/vm.hpp"

namespace rexa::host {

enum class SignalKind : std::uint8_t { constant, sine_burst, square, trace };

struct SignalConfig {
  SignalKind kind = SignalKind::sine_burst;
  double amplitude = 1000;
  double offset = 0;
  double freq_hz = 5000;         // sine/square frequency
  std::uint32_t burst = 512;     // sine-burst length in samples (hamming window)
  double noise = 0;              // uniform additive noise amplitude
  std::uint64_t seed = 1;
  std::vector<Cell> trace;       // SignalKind::trace samples, repeated
  std::map<std::uint32_t, Cell> peaks;  // sample index -> forced value
};

/// Deterministic sample generator; sample n of an acquisition at `rate_hz`.
class SignalSource {
 public:
  explicit SignalSource(SignalConfig cfg = {});
  /// Begins an acquisition; the noise sequence restarts from the seed mixed
  /// with the acquisition number.
  void start(std::uint64_t acquisition);
  /// Samples must be requested in increasing order within an acquisition.
  Cell sample(std::uint32_t n, double rate_hz);
  /// Noise-free value (used by oracles).
  double ideal(std::uint32_t n, double rate_hz) const;
  const SignalConfig& config() const { return cfg_; }
  const std::mt19937_64& rng() const { return rng_; }
  void set_rng(const std::mt19937_64& r) { rng_ = r; }

  /// Parses a CSV of samples (one or more per line, '#' comments).
  static std::vector<Cell> load_trace(const std::string& text);

 private:
  SignalConfig cfg_;
  std::mt19937_64 rng_;
};

/// Unit hamming window of length n at index k.
double hamming(std::uint32_t k, std::uint32_t n);

/// Field-on intervals with the harvested power present in each.
struct PowerInterval {
  std::uint64_t start_us = 0;
  std::uint64_t end_us = 0;
  double power_uW = 0;
};

struct PowerCycle {
  std::vector<PowerInterval> intervals;
  double capacity_uJ = 100;
  double drain_uW = 1000;  // P_d1 while computing
  double initial_uJ = 0;

  PowerTrace trace() const;
  /// CSV rows: start_us,end_us,power_uW.
  static PowerCycle from_csv(const std::string& text);
};

class Network;

struct NodeConfig {
  int id = 0;
  VmConfig vm;
  std::uint16_t buffer_cells = 8192;
  std::uint16_t ring_start = 0;     // sample0 offset inside the acquired window
  std::uint16_t wave_cells = 256;   // DAC table length
  Cell trigger_free = 10;
  Cell trigger_single = 4;
  Cell trigger_threshold = 500;
  std::uint32_t trigger_search = 1u << 20;  // samples scanned for a SINGLE trigger
  std::uint32_t dac_burst_cycles = 5;
  std::size_t capture_limit = 1u << 20;
  SignalConfig signal;
  bool dsp_library = true;
  const isa::Isa* isa = nullptr;  // default word set when null

  /// JSON node description (see README); throws ConfigError.
  static NodeConfig from_json(const std::string& text);
};

struct DacSample {
  std::uint64_t time_us;
  Cell value;
};

class Node : public HostPort, public SliceHooks {
 public:
  explicit Node(NodeConfig cfg = {});
  ~Node() override;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  Vm& vm() { return vm_; }
  const Vm& vm() const { return vm_; }
  const NodeConfig& config() const { return cfg_; }
  int id() const { return cfg_.id; }

  void attach(Network* net) { net_ = net; }
  /// Queues values for the `in` word.
  void push_input(Cell v) { input_.push_back(v); }

  // Device state as seen by tests.
  const std::vector<Cell>& samples() const { return samples_; }
  Cell sample0() const { return sample0_; }
  Cell sampled() const { return sampled_; }
  std::vector<Cell>& wave_table() { return wave_; }
  const std::vector<DacSample>& dac_capture() const { return capture_; }
  bool adc_busy() const { return adc_.active; }
  std::uint64_t acquisitions() const { return acquisitions_; }

  /// Simulates losing all volatile VM and device state.
  void reboot();

  // HostPort
  bool link_send(Cell dst, std::span<const Cell> values) override;
  bool link_can_send(Cell dst, std::size_t n) const override;
  std::optional<Cell> link_receive(Cell src) override;
  bool link_can_receive(Cell src) const override;
  std::optional<Cell> input() override;
  bool input_ready() const override { return !input_.empty(); }

  // SliceHooks
  void before_slice(Vm& vm) override;
  std::optional<std::uint64_t> next_event_us(const Vm& vm) const override;
  std::vector<std::uint8_t> save_host() const override;
  void restore_host(std::span<const std::uint8_t> bytes) override;

 private:
  struct Adc {
    bool active = false;
    bool triggered = false;
    std::uint32_t depth = 0;
    std::int32_t gain = 1;
    std::int32_t freq_ksps = 1;
    std::uint64_t done_us = 0;
    std::uint32_t trigger_at = 0;
  };
  struct Dac {
    bool active = false;
    bool periodic = false;
    std::int32_t wave = 0;
    std::int32_t ampl = 1000;
    std::int32_t freq_ksps = 1;
    std::uint64_t start_us = 0;
    std::uint64_t emitted = 0;  // samples produced so far
    std::vector<Cell> table;
  };

  void register_ios();
  std::int32_t adc_start(IosCall& c);
  std::int32_t dac_start(IosCall& c);
  void update_devices(std::uint64_t now);
  void complete_adc();
  std::vector<Cell> make_wave(std::int32_t wave) const;

  NodeConfig cfg_;
  Vm vm_;
  Network* net_ = nullptr;
  SignalSource source_;
  std::vector<Cell> samples_;
  Cell sample0_ = 0;
  Cell sampled_ = 0;
  std::vector<Cell> wave_;
  Adc adc_;
  Dac dac_;
  std::vector<DacSample> capture_;
  std::deque<Cell> input_;
  std::uint64_t acquisitions_ = 0;
};

struct LinkEvent {
  int src;
  int dst;
  Cell value;
  bool operator==(const LinkEvent&) const = default;
};

/// Directed FIFO links between nodes. Safe to use from several threads.
class Network {
 public:
  explicit Network(std::size_t link_capacity = 64) : capacity_(link_capacity) {}

  void add_node(Node& n);
  /// Static topologies; links are directed, connect() adds both directions.
  void connect(int a, int b);
  void star(int hub);
  void mesh();

  bool has_link(int src, int dst) const;
  std::size_t capacity() const { return capacity_; }
  bool send(int src, int dst, std::span<const Cell> values);
  bool can_send(int src, int dst, std::size_t n) const;
  std::optional<Cell> receive(int src, int dst);
  bool can_receive(int src, int dst) const;

  std::vector<LinkEvent> trace() const;
  std::vector<Node*> nodes() const { return nodes_; }

  /// Deterministic round-robin execution: one slice per node per round,
  /// idle time skipped on each node's simulated clock. Returns the number of
  /// rounds; stops when no node has live tasks or nothing can progress.
  std::size_t run(std::size_t max_rounds = 1'000'000);
  /// One worker thread per node; links are the only shared state. Returns
  /// true when every node finished.
  bool run_threaded(std::uint64_t max_slices_per_node = 10'000'000);

 private:
  struct Link {
    std::deque<Cell> queue;
  };
  Link* find(int src, int dst);
  const Link* find(int src, int dst) const;

  std::size_t capacity_;
  std::vector<Node*> nodes_;
  std::map<std::pair<int, int>, Link> links_;
  std::vector<LinkEvent> trace_;
  mutable std::mutex mu_;
};

struct PoweredOutcome {
  RunOutcome run;
  std::size_t brownouts = 0;
  std::size_t restores = 0;
  double harvested_uJ = 0;
  double drained_uJ = 0;
  double wasted_uJ = 0;
  double energy_uJ = 0;  // stored at the end
  bool starved = false;  // the field never returned
};

/// Runs the node's tasks under an energy budget. Before each slice the
/// worst-case slice energy is checked; if storage cannot cover it the VM is
/// checkpointed and powered down, and restored after enough energy has been
/// harvested in a later field-on interval.
PoweredOutcome run_powered(Node& node, const PowerCycle& power, std::size_t max_slices = 10'000'000);

}  // namespace rexa::host
