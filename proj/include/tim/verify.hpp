#pragma once

#include <string>
#include <vector>

namespace tim {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;      ///< measured statistic
  double threshold = 0;  ///< bound it is compared against
  std::string detail;
};

struct VerifyOptions {
  bool full = false;
  /// Test hook: scales dB/dt by 1.5 wherever the battery builds transition
  /// coefficients, so the harness can be checked against a broken algebra.
  bool corrupt_db_dt = false;
};

/// Runs the invariant battery. The fast level covers transport derivatives,
/// closed-form cross-checks, identity residuals, reductions, DDE order,
/// gradient checks and the shift round trip; the full level adds the
/// Gaussian-oracle sampler checks.
std::vector<CheckResult> run_verify(const VerifyOptions& opts);

}  // namespace tim
