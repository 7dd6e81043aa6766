// Prints one [PASS]/[FAIL] line per primary acceptance criterion; exits nonzero on any failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "chips/verify.hpp"

namespace {

// check name -> criterion label
const std::pair<const char*, const char*> kCriteria[] = {
    {"gradient-oracle", "Gradient oracle"},
    {"flops-exactness", "FLOPs exactness"},
    {"correlation-bound", "Correlation lower bound"},
    {"sketch-variance", "Sketch variance and curvature bias"},
    {"drift-bound", "Drift bound"},
    {"batch-moments", "Batch-moment identity"},
    {"descent", "Descent property"},
    {"proxy-fidelity", "Proxy fidelity"},
    {"oracle-equivalences", "Oracle equivalences"},
    {"determinism", "Determinism"},
};

std::string clipped(const std::string& s, std::size_t n) { return s.size() <= n ? s : s.substr(0, n) + "..."; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  chips::verify::CheckOptions opts;
  std::string work_dir;
  app.add_option("--work-dir", work_dir, "Scratch directory");
  app.add_option("--seed", opts.seed, "Seed");
  app.add_option("--workers", opts.workers, "Worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  if (!work_dir.empty()) opts.work_dir = work_dir;

  int failures = 0;
  for (const auto& [check, label] : kCriteria) {
    const auto r = chips::verify::run_check(check, opts);
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2fs", r.seconds);
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << label << " (" << timing << ") "
              << clipped(r.detail.dump(), 600) << std::endl;
    failures += r.pass ? 0 : 1;
  }
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed" : "acceptance: all criteria passed")
            << std::endl;
  return failures ? 1 : 0;
}
