#pragma once

// Straight-line re-evaluations used as test oracles. Nothing here touches the
// autograd graph, im2col or Eigen: every value is recomputed with plain loops
// from raw parameter arrays.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mslae/network.hpp"

namespace mslae::reference {

struct Grid {
  int64_t n = 0, c = 0, h = 0, w = 0;
  std::vector<float> v;

  Grid() = default;
  Grid(int64_t n_, int64_t c_, int64_t h_, int64_t w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_ * c_ * h_ * w_), fill) {}

  float& at(int64_t i, int64_t ch, int64_t y, int64_t x) { return v[static_cast<size_t>(((i * c + ch) * h + y) * w + x)]; }
  float at(int64_t i, int64_t ch, int64_t y, int64_t x) const {
    return v[static_cast<size_t>(((i * c + ch) * h + y) * w + x)];
  }
};

Grid from_tensor(const Tensor& t);

// Stride-1 convolution with symmetric zero padding `pad`. Each output starts
// at 0 and adds w*x over (ci, ky, kx) ascending, padded taps included as w*0,
// then the bias.
Grid conv(const Grid& x, const Grid& weight, const std::vector<float>& bias, int64_t dilation, int64_t pad);
Grid avg_pool(const Grid& x, int64_t oh, int64_t ow);
Grid bilinear(const Grid& x, int64_t oh, int64_t ow);
Grid max_pool(const Grid& x);
Grid relu(const Grid& x);
Grid sigmoid(const Grid& x);
Grid add(const Grid& a, const Grid& b);
Grid mul(const Grid& a, const Grid& b);
Grid concat(const Grid& a, const Grid& b);
Grid pad(const Grid& x, int64_t bottom, int64_t right);
Grid crop(const Grid& x, int64_t h, int64_t w);

struct Stats {
  std::vector<float> mean, var;
};
// Train mode normalizes with the biased batch variance and folds mean and
// unbiased variance into `stats` (momentum 0.1); eval reads `stats`.
Grid batch_norm(const Grid& x, const std::vector<float>& gamma, const std::vector<float>& beta, Stats& stats,
                bool train);

/// Parameters and statistics looked up by name from a model state. Stats are
/// copied, so oracle evaluation never disturbs the state.
class Params {
 public:
  explicit Params(const ParameterSet& set);
  Grid weight(const std::string& conv) const;
  std::vector<float> vec(const std::string& name) const;
  bool has(const std::string& name) const { return set_.find(name) != nullptr; }
  Stats& stats(const std::string& bn);

 private:
  const ParameterSet& set_;
  std::map<std::string, Stats> stats_;
};

Grid conv_layer(Params& p, const std::string& name, const Grid& x, int64_t dilation = 1);
Grid conv_bn_relu(Params& p, const std::string& name, const Grid& x, bool train);
Grid conv_block(Params& p, const std::string& name, const Grid& x, bool train);
Grid ddpp(Params& p, const std::string& name, const Grid& x, int64_t dilation);

struct SAResult {
  Grid residual, attention, output;
};
SAResult sa(Params& p, const std::string& name, const Grid& x, bool train);

struct EBlockResult {
  Grid out, ddpp_tap, sa_tap;
};
EBlockResult eblock(Params& p, const std::string& name, const Grid& x, int level, bool train);
Grid dblock(Params& p, const std::string& name, const Grid& x, const Grid& skip, bool train);
Grid aggregate(Params& p, const std::string& name, const std::vector<Grid>& taps, int64_t h, int64_t w);
// Whole network including pad and crop; returns probabilities.
Grid network(Params& p, const Grid& x, bool train);

// Parameter count from the configuration alone.
int64_t param_count(const NetworkConfig& config);
int64_t conv_block_params(int64_t in, int64_t out);

struct Counts {
  uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
};
// Pixel-by-pixel recount; an empty fov counts everything.
Counts recount(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, const std::vector<uint8_t>& fov);
// Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2.
std::optional<double> pair_auroc(const std::vector<float>& scores, const std::vector<uint8_t>& gt);

// Direct double-loop DFT of the field alpha*H_s(2p-1) - g, weighted by
// 1/(2(|k| + eps)) with the DC term dropped, averaged over the batch.
double ei_energy(const Grid& p, const Grid& g, double alpha, double beta, double eps);
double dice(const std::vector<double>& p, const std::vector<double>& g);
double bce(const std::vector<double>& p, const std::vector<double>& g);

// Textbook scalar Adam: returns the parameter after `steps` updates on
// f(w) = (w - target)^2.
double adam_quadratic(double w0, double target, double lr, int steps, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8);

}  // namespace mslae::reference
