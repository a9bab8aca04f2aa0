#include "rexa/bench.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>
#include <vector>

#include "rexa/error.hpp"

namespace rexa {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Sample {
  std::uint64_t words = 0;
  double seconds = 0;
  double rate() const { return seconds > 0 ? static_cast<double>(words) / seconds / 1e6 : 0; }
};

Sample measure_exec(const VmConfig& cfg, double min_seconds) {
  Vm vm(cfg);
  vm.set_output([](std::uint8_t, std::string_view) {});
  Sample s;
  const auto t0 = Clock::now();
  do {
    const CompileResult c = vm.compile(bench_exec_program());
    vm.spawn(c.frame);
    const std::uint64_t before = vm.total_steps();
    const RunOutcome o = vm.run();
    if (o.status != RunStatus::done || o.error) throw Error("benchmark program did not run to completion");
    s.words += vm.total_steps() - before;
  } while (seconds_since(t0) < min_seconds);
  s.seconds = seconds_since(t0);
  return s;
}

Sample measure_compile(const VmConfig& cfg, double min_seconds) {
  Vm vm(cfg);
  Sample s;
  const auto t0 = Clock::now();
  do {
    const CompileResult c = vm.compile(bench_compile_program());
    s.words += c.stats.tokens;
    vm.free_frame(c.frame);
  } while (seconds_since(t0) < min_seconds);
  s.seconds = seconds_since(t0);
  return s;
}

Sample median(std::vector<Sample> v) {
  std::sort(v.begin(), v.end(), [](const Sample& a, const Sample& b) { return a.rate() < b.rate(); });
  return v[v.size() / 2];
}

}  // namespace

const std::string& bench_exec_program() {
  static const std::string src = R"(
: kernel ( n -- sum ) 0 swap 0 do i 3 * 7 mod + dup 1000 > if 1000 - endif loop ;
: mix ( a b -- c ) over over xor rot rot and + 255 and ;
var acc 0 acc !
400 0 do
  300 kernel acc @ + 4096 mod acc !
  i 17 mix acc @ + acc !
loop
)";
  return src;
}

const std::string& bench_compile_program() {
  static const std::string src = R"(
: sq dup * ;
: cube dup sq * ;
: clip 0 max 1000 min ;
: avg + 2 / ;
: acc3 rot + swap 1+ swap ;
var total 0 total !
var count
array buf 16
10 0 do i sq total @ + total ! loop
begin total @ 2 / dup total ! 10 < until
4 0 do i buf i + ! 2 +loop
5 3 avg 7 cube clip drop drop
1 2 3 acc3 drop drop drop
total @ 100 > if 1 else 0 endif count !
)";
  return src;
}

BenchReport run_bench(const BenchOptions& opt) {
  if (opt.repeats < 1) throw ConfigError("bench repeats must be at least 1");
  VmConfig cfg = opt.vm;
  cfg.steps = std::max<std::uint32_t>(cfg.steps, 1u << 16);
  cfg.longest_us = std::max<std::uint64_t>(cfg.longest_us, 1u << 30);
  cfg.clock = ClockMode::simulated;
  cfg.profile = false;

  std::vector<Sample> exec, comp;
  for (int r = 0; r < opt.repeats; ++r) {
    exec.push_back(measure_exec(cfg, opt.min_seconds));
    comp.push_back(measure_compile(cfg, opt.min_seconds));
  }
  const Sample e = median(exec);
  const Sample c = median(comp);
  BenchReport rep;
  rep.mwps = e.rate();
  rep.mcps = c.rate();
  rep.words_executed = e.words;
  rep.words_compiled = c.words;
  rep.exec_seconds = e.seconds;
  rep.compile_seconds = c.seconds;
  rep.vm = opt.vm;
  rep.word_count = isa::Isa::default_isa().words().size();
  return rep;
}

std::string BenchReport::to_string() const {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << "MWPS " << mwps << "\nMCPS " << mcps << "\nratio " << ratio() << "\nexecuted " << words_executed
    << " words in " << exec_seconds << " s\ncompiled " << words_compiled << " words in " << compile_seconds
    << " s\nCS " << vm.cs_size << " DS " << vm.ds_size << " RS " << vm.rs_size << " FS " << vm.fs_size
    << " words " << word_count << "\n";
  return o.str();
}

double efficiency(double C, double M, double A, double P) {
  if (!(A > 0) || !(P > 0)) throw ConfigError("chip area and power must be positive");
  return C * M / (A * P);
}

}  // namespace rexa
