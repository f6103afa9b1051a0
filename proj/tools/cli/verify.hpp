#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mslae/ops.hpp"

namespace mslae::cli {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SuiteOptions {
  std::vector<uint64_t> seeds{0, 1, 2};
  // Corrupts one pullback while the gradient checks run; they must then fail.
  testing::GradFault fault = testing::GradFault::none;
  // Skip the end-to-end network gradcheck (the slowest single check).
  bool skip_end_to_end = false;
};

// Finite-difference checks of every op, block and both aggregation paths,
// then the reduced network end to end. One result per case over all seeds.
std::vector<CheckResult> gradient_checks(const SuiteOptions& options);
// BCE, Dice, EI and the smoothed Heaviside at 8x8.
std::vector<CheckResult> loss_gradient_checks(const SuiteOptions& options);

std::vector<CheckResult> ddpp_oracle_checks(uint64_t seed);
std::vector<CheckResult> sa_algebra_checks(uint64_t seed);
// E-Block, D-Block, aggregators, whole network and parameter counts against
// the straight-line oracles.
std::vector<CheckResult> block_oracle_checks(uint64_t seed);
std::vector<CheckResult> metric_oracle_checks(uint64_t seed);
std::vector<CheckResult> loss_value_checks(uint64_t seed);
std::vector<CheckResult> augmentation_checks(uint64_t seed);

// Everything above; results are printed to `out` as they complete.
std::vector<CheckResult> run_verify_suite(const SuiteOptions& options, std::ostream& out);

void print_check(std::ostream& out, const CheckResult& r);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace mslae::cli
