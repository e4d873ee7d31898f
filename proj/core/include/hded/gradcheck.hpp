#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace hded {

struct GradCheckOptions {
  std::size_t instances = 5;  // random problems per case
  double step = 1e-4;         // central-difference half step
  double tolerance = 1e-4;    // max relative error
  // Denominator floor: entries smaller than this are compared against it, so
  // finite-difference rounding (~1e-12) on near-zero gradients is not amplified.
  double abs_floor = 1e-6;
  std::uint64_t seed = 0;
  std::string only;           // run only cases whose name contains this
};

struct GradCheckCase {
  std::string name;
  std::size_t instances = 0;
  std::size_t checked = 0;  // gradient entries compared
  double max_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const;
  double max_error() const;
  nlohmann::json to_json() const;
  /// One line per case: name, instances, entries, max error, PASS/FAIL.
  std::string to_text() const;
};

/// Names of every case the suite runs, in order.
std::vector<std::string> gradcheck_case_names();

/// Compares reverse-mode gradients of every differentiable op and every loss
/// against central finite differences in double precision.
GradCheckReport run_gradcheck(const GradCheckOptions& options = {});

}  // namespace hded
