#pragma once

// Acceptance checks, one function per criterion. Each returns a verdict
// plus a short measurement summary.

#include <string>

namespace criteria {

struct Verdict {
  bool pass = false;
  std::string detail;
};

Verdict sigmoid_accuracy();        // 1
Verdict lut_reproduction();        // 2
Verdict parse_tables();            // 3
Verdict literal_format();          // 4
Verdict in_place_compilation();    // 5
Verdict ann_end_to_end();          // 6
Verdict scheduler();               // 7
Verdict checkpoint_fidelity();     // 8
Verdict use_case_fixtures();       // 9
Verdict performance_metrics();     // 10
Verdict efficiency_metric();       // 11

}  // namespace criteria
