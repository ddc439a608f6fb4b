#pragma once

// Self-check harness: runs the invariant suites and reports a JSON verdict.

#include <string>
#include <vector>

namespace flowreg {

struct SuiteResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;  // largest observed deviation
  double tolerance = 0.0;
  std::string detail;
};

struct CheckOptions {
  // Suite name ("F1") or family prefix ("F"); empty runs everything.
  std::string suite;
  // Breaks the coupling inverse so that the cycle-consistency suite must fail.
  bool inject_fault = false;
};

std::vector<std::string> check_suite_names();
std::vector<SuiteResult> run_checks(const CheckOptions& options);
std::string check_report_json(const std::vector<SuiteResult>& results);

}  // namespace flowreg
