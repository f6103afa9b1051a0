#pragma once

#include <cstdint>
#include <vector>

#include "mslae/tensor.hpp"

namespace mslae {

struct Hw {
  int64_t h = 1;
  int64_t w = 1;
  bool operator==(const Hw&) const = default;
};

struct ConvSpec {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  Hw kernel{3, 3};
  Hw stride{1, 1};
  Hw padding{0, 0};
  int64_t dilation = 1;

  /// Spec with "same" padding d*(k-1)/2 for an odd square kernel.
  static ConvSpec same(int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t dilation = 1);

  Hw output_size(Hw input) const;
  // d*(k-1)+1 per axis.
  Hw receptive_field() const;
  Shape weight_shape() const { return Shape{out_channels, in_channels, kernel.h, kernel.w}; }
  void validate() const;
};

/// Cross-correlation with zero padding. `bias` may be undefined.
///
/// Each output is accumulated in float over (input channel, kernel row, kernel
/// column) in that order starting from zero; the bias is added last.
Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& weight, const Tensor& bias);

/// Adaptive average pooling: output cell i covers rows floor(i*H/oh) ..
/// floor((i+1)*H/oh)-1, so the windows tile the input without overlap.
Tensor adaptive_avg_pool2d(const Tensor& input, Hw out);

/// Bilinear resize with half-pixel centers (align_corners = false).
Tensor upsample_bilinear(const Tensor& input, Hw out);

enum class Mode { train, eval };

struct RunningStats {
  std::vector<float> mean;
  std::vector<float> var;
  // False until a train-mode batch or an explicit reset has populated the buffers.
  bool recorded = false;

  static RunningStats unrecorded(int64_t channels);
  // mean 0 / var 1, marked usable in eval mode.
  static RunningStats defaults(int64_t channels);
};

struct BatchNormOptions {
  float eps = 1e-5f;
  float momentum = 0.1f;
};

/// Train mode normalizes with biased batch statistics and folds the unbiased
/// variance into `stats` with the given momentum. Eval mode reads `stats` and
/// throws if they were never recorded.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats, Mode mode,
                   const BatchNormOptions& options = {});

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
// 2x2 window, stride 2; odd trailing rows/cols are dropped.
Tensor maxpool2d(const Tensor& input);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Sum of all elements as a 1x1x1x1 tensor (double accumulation).
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Elementwise product with a constant tensor, then summed.
Tensor weighted_sum(const Tensor& a, const Tensor& weights);

// Zero rows appended at the bottom and columns at the right.
Tensor pad_zero(const Tensor& input, int64_t bottom, int64_t right);
// Top-left h x w window.
Tensor crop(const Tensor& input, Hw size);

namespace testing {

enum class GradFault { none, flip_sigmoid, flip_conv_input };

/// Deliberately corrupts a pullback on this thread. Used to prove that the
/// gradient checks can fail.
class ScopedGradFault {
 public:
  explicit ScopedGradFault(GradFault fault);
  ~ScopedGradFault();
  ScopedGradFault(const ScopedGradFault&) = delete;
  ScopedGradFault& operator=(const ScopedGradFault&) = delete;

 private:
  GradFault previous_;
};

GradFault active_grad_fault();

/// Branch decisions of piecewise ops (relu sign, maxpool2d winning index,
/// hardtanh band), in evaluation order. Recording appends them; replaying forces each op to take
/// the recorded branch, so a perturbed evaluation stays on the smooth piece
/// of the recorded point.
class ScopedBranchRecord {
 public:
  explicit ScopedBranchRecord(std::vector<int64_t>& sink);
  ~ScopedBranchRecord();
  ScopedBranchRecord(const ScopedBranchRecord&) = delete;
  ScopedBranchRecord& operator=(const ScopedBranchRecord&) = delete;
};

class ScopedBranchReplay {
 public:
  explicit ScopedBranchReplay(const std::vector<int64_t>& pattern);
  ~ScopedBranchReplay();
  ScopedBranchReplay(const ScopedBranchReplay&) = delete;
  ScopedBranchReplay& operator=(const ScopedBranchReplay&) = delete;
  // True when exactly the recorded number of decisions was consumed.
  bool complete() const;
};

// For piecewise ops: the next `n` decisions to force, or nullptr when not
// replaying; and the record sink, or nullptr when not recording.
const int64_t* take_branches(size_t n);
std::vector<int64_t>* branch_sink();


}  // namespace testing

}  // namespace mslae
