#pragma once

// Throughput benchmark: bytecode word executions and word compilations per
// wall-clock second over a bundled calibration corpus.

#include <cstddef>
#include <cstdint>
#include <string>

#include "rexa/vm.hpp"

namespace rexa {

struct BenchOptions {
  double min_seconds = 0.15;  // per timed measurement
  int repeats = 3;            // the median measurement is reported
  VmConfig vm;
};

struct BenchReport {
  double mwps = 0;  // million bytecode word executions per second
  double mcps = 0;  // million word compilations per second
  std::uint64_t words_executed = 0;
  std::uint64_t words_compiled = 0;
  double exec_seconds = 0;
  double compile_seconds = 0;
  VmConfig vm;
  std::size_t word_count = 0;

  double ratio() const { return mcps > 0 ? mwps / mcps : 0; }
  std::string to_string() const;
};

/// Programs the benchmark uses.
const std::string& bench_exec_program();
const std::string& bench_compile_program();

BenchReport run_bench(const BenchOptions& opt = {});

/// Normalized performance factor: eps = C * M / (A * P).
double efficiency(double C, double M, double A, double P);

}  // namespace rexa
