#include "mslae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mslae/error.hpp"
#include "mslae/ops.hpp"

namespace mslae {

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL");
  for (size_t i = 0; i < inputs.size(); ++i) {
    const GradcheckInputReport& r = inputs[i];
    os << " [in" << i << ": n=" << r.entries_checked << " max_abs=" << r.max_abs_error << " max_rel=" << r.max_rel_error
       << " fail=" << r.failures << "]";
  }
  return os.str();
}

namespace {

std::vector<int64_t> shuffled(int64_t n, std::mt19937_64& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

Tensor record(const GraphFn& fn, const std::vector<Tensor>& inputs, std::vector<int64_t>& branches) {
  NoGradGuard guard;
  testing::ScopedBranchRecord scope(branches);
  return fn(inputs);
}

// Evaluates on the smooth piece the recorded point lies on, so a relu or
// maxpool decision flipping inside [x - step, x + step] does not distort the
// difference quotient.
Tensor replay(const GraphFn& fn, const std::vector<Tensor>& inputs, const std::vector<int64_t>& branches) {
  NoGradGuard guard;
  testing::ScopedBranchReplay scope(branches);
  Tensor y = fn(inputs);
  if (!scope.complete()) throw ConfigError("gradcheck: perturbed graph took fewer branch decisions than recorded");
  return y;
}

}  // namespace

GradcheckReport gradcheck(const GraphFn& fn, std::vector<Tensor> inputs, const GradcheckOptions& options) {
  for (Tensor& t : inputs) {
    check_finite(t.data(), "gradcheck input");
    t.zero_grad();
    t.set_requires_grad(true);
  }
  std::mt19937_64 rng(options.seed);

  std::vector<int64_t> base_branches, again_branches;
  const Tensor reference = record(fn, inputs, base_branches);
  const Tensor again = record(fn, inputs, again_branches);
  if (again.shape() != reference.shape() || again_branches != base_branches ||
      !std::equal(again.data().begin(), again.data().end(), reference.data().begin()))
    throw ConfigError("gradcheck: graph is not deterministic (two evaluations at the same point differ)");
  const Shape out_shape = reference.shape();

  std::vector<int64_t> outputs = shuffled(out_shape.numel(), rng);
  if (options.max_outputs > 0 && out_shape.numel() > options.max_outputs)
    outputs.resize(static_cast<size_t>(options.max_outputs));
  std::sort(outputs.begin(), outputs.end());

  GradcheckReport report;
  std::vector<std::vector<int64_t>> entries(inputs.size());
  std::vector<std::vector<double>> numeric(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    report.inputs.emplace_back();
    auto values = inputs[i].mutable_data();
    const int64_t want = options.max_entries_per_input > 0 ? options.max_entries_per_input : inputs[i].numel();
    std::vector<int64_t> picked = shuffled(inputs[i].numel(), rng);
    if (static_cast<int64_t>(picked.size()) > want) picked.resize(static_cast<size_t>(want));
    for (int64_t at : picked) {
      const size_t k = static_cast<size_t>(at);
      const float original = values[k];
      const float up = static_cast<float>(original + options.step);
      const float down = static_cast<float>(original - options.step);
      values[k] = up;
      const Tensor y_up = replay(fn, inputs, base_branches);
      values[k] = down;
      const Tensor y_down = replay(fn, inputs, base_branches);
      values[k] = original;
      entries[i].push_back(at);
      // Divide by the step actually representable in float.
      const double width = static_cast<double>(up) - static_cast<double>(down);
      for (int64_t o : outputs) {
        const size_t ko = static_cast<size_t>(o);
        numeric[i].push_back((static_cast<double>(y_up.data()[ko]) - static_cast<double>(y_down.data()[ko])) / width);
      }
    }
  }

  // Analytic rows: one backward pass per compared output element.
  std::vector<std::vector<double>> analytic(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) analytic[i].assign(numeric[i].size(), 0.0);
  for (size_t o = 0; o < outputs.size(); ++o) {
    for (Tensor& t : inputs) t.zero_grad();
    std::vector<float> onehot(static_cast<size_t>(out_shape.numel()), 0.0f);
    onehot[static_cast<size_t>(outputs[o])] = 1.0f;
    weighted_sum(fn(inputs), Tensor::from_data(out_shape, std::move(onehot))).backward();
    for (size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].has_grad()) continue;
      auto g = inputs[i].grad();
      for (size_t e = 0; e < entries[i].size(); ++e)
        analytic[i][e * outputs.size() + o] = g[static_cast<size_t>(entries[i][e])];
    }
  }
  for (Tensor& t : inputs) t.zero_grad();

  for (size_t i = 0; i < inputs.size(); ++i) {
    GradcheckInputReport& r = report.inputs[i];
    for (size_t k = 0; k < numeric[i].size(); ++k) {
      const double a = analytic[i][k];
      const double n = numeric[i][k];
      const double abs_err = std::abs(a - n);
      const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
      if (abs_err > options.atol + options.rtol * std::abs(n)) ++r.failures;
      ++r.entries_checked;
    }
    if (r.failures > 0) report.passed = false;
  }
  return report;
}

}  // namespace mslae
