#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mslae/tensor.hpp"

namespace mslae {

struct GradcheckOptions {
  double step = 1e-3;      // central-difference half step
  double rtol = 1e-2;
  double atol = 1e-3;
  // Entries compared per input; 0 means every entry.
  int64_t max_entries_per_input = 0;
  // Output elements compared per probed entry; 0 means every element.
  int64_t max_outputs = 0;
  uint64_t seed = 0;  // entry and output sampling
};

struct GradcheckInputReport {
  int64_t entries_checked = 0;  // Jacobian elements compared
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  int64_t failures = 0;
};

struct GradcheckReport {
  std::vector<GradcheckInputReport> inputs;
  bool passed = true;
  std::string summary() const;
};

using GraphFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares the reverse-mode Jacobian of `fn` against central finite
/// differences, element by element: analytic rows come from one backward pass
/// per output element, numeric columns from perturbing one input entry.
/// Perturbed evaluations replay the relu/maxpool decisions of the unperturbed
/// point, so the quotient differentiates the smooth piece the point lies on.
/// An element passes when |analytic - numeric| <= atol + rtol * |numeric|.
/// Inputs are perturbed in place and restored. Throws ConfigError if two
/// evaluations at the same point differ.
GradcheckReport gradcheck(const GraphFn& fn, std::vector<Tensor> inputs, const GradcheckOptions& options = {});

}  // namespace mslae
