#include "mslae/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "mslae/error.hpp"

namespace mslae {

namespace testing {
namespace {
thread_local GradFault t_fault = GradFault::none;
struct BranchState {
  std::vector<int64_t>* sink = nullptr;
  const std::vector<int64_t>* replay = nullptr;
  size_t cursor = 0;
};
thread_local BranchState t_branch;

}  // namespace

const int64_t* take_branches(size_t n) {
  if (!t_branch.replay) return nullptr;
  if (t_branch.cursor + n > t_branch.replay->size())
    throw ConfigError("branch replay: graph takes more decisions than were recorded");
  const int64_t* p = t_branch.replay->data() + t_branch.cursor;
  t_branch.cursor += n;
  return p;
}

std::vector<int64_t>* branch_sink() { return t_branch.sink; }

ScopedGradFault::ScopedGradFault(GradFault fault) : previous_(t_fault) { t_fault = fault; }
ScopedGradFault::~ScopedGradFault() { t_fault = previous_; }
GradFault active_grad_fault() { return t_fault; }
ScopedBranchRecord::ScopedBranchRecord(std::vector<int64_t>& sink) { t_branch = {&sink, nullptr, 0}; }
ScopedBranchRecord::~ScopedBranchRecord() { t_branch = {}; }
ScopedBranchReplay::ScopedBranchReplay(const std::vector<int64_t>& pattern) { t_branch = {nullptr, &pattern, 0}; }
ScopedBranchReplay::~ScopedBranchReplay() { t_branch = {}; }
bool ScopedBranchReplay::complete() const { return t_branch.replay && t_branch.cursor == t_branch.replay->size(); }
}  // namespace testing

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

size_t sz(int64_t v) { return static_cast<size_t>(v); }

// Rows of output handled per im2col tile.
int64_t tile_rows(int64_t out_w) { return std::max<int64_t>(1, 2048 / std::max<int64_t>(1, out_w)); }

struct ConvGeometry {
  ConvSpec spec;
  Shape in;
  Hw out;
  int64_t k() const { return spec.in_channels * spec.kernel.h * spec.kernel.w; }
};

// col[k * P + p] for output rows [oy0, oy1) of sample n.
void im2col(const ConvGeometry& g, const float* x, int64_t oy0, int64_t oy1, std::vector<float>& col) {
  const auto& s = g.spec;
  const int64_t P = (oy1 - oy0) * g.out.w;
  col.resize(sz(g.k() * P));
  float* dst = col.data();
  for (int64_t ci = 0; ci < s.in_channels; ++ci) {
    const float* plane = x + ci * g.in.h * g.in.w;
    for (int64_t ky = 0; ky < s.kernel.h; ++ky) {
      for (int64_t kx = 0; kx < s.kernel.w; ++kx) {
        for (int64_t oy = oy0; oy < oy1; ++oy) {
          const int64_t iy = oy * s.stride.h - s.padding.h + ky * s.dilation;
          const bool row_ok = iy >= 0 && iy < g.in.h;
          for (int64_t ox = 0; ox < g.out.w; ++ox) {
            const int64_t ix = ox * s.stride.w - s.padding.w + kx * s.dilation;
            *dst++ = (row_ok && ix >= 0 && ix < g.in.w) ? plane[iy * g.in.w + ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const float* col, int64_t oy0, int64_t oy1, float* gx) {
  const auto& s = g.spec;
  const float* src = col;
  for (int64_t ci = 0; ci < s.in_channels; ++ci) {
    float* plane = gx + ci * g.in.h * g.in.w;
    for (int64_t ky = 0; ky < s.kernel.h; ++ky) {
      for (int64_t kx = 0; kx < s.kernel.w; ++kx) {
        for (int64_t oy = oy0; oy < oy1; ++oy) {
          const int64_t iy = oy * s.stride.h - s.padding.h + ky * s.dilation;
          const bool row_ok = iy >= 0 && iy < g.in.h;
          for (int64_t ox = 0; ox < g.out.w; ++ox, ++src) {
            const int64_t ix = ox * s.stride.w - s.padding.w + kx * s.dilation;
            if (row_ok && ix >= 0 && ix < g.in.w) plane[iy * g.in.w + ix] += *src;
          }
        }
      }
    }
  }
}

// out[co][p] = sum_k w[co][k] * col[k][p], k ascending. Four output channels
// share each pass over col.
void forward_tile(const float* w, int64_t cout, int64_t K, const float* col, int64_t P, float* out,
                  int64_t out_stride, const float* bias) {
  std::vector<float> acc(sz(4 * P));
  for (int64_t co0 = 0; co0 < cout; co0 += 4) {
    const int64_t nb = std::min<int64_t>(4, cout - co0);
    std::fill(acc.begin(), acc.end(), 0.0f);
    float* a0 = acc.data();
    float* a1 = a0 + P;
    float* a2 = a1 + P;
    float* a3 = a2 + P;
    for (int64_t k = 0; k < K; ++k) {
      const float* c = col + k * P;
      const float w0 = w[co0 * K + k];
      const float w1 = nb > 1 ? w[(co0 + 1) * K + k] : 0.0f;
      const float w2 = nb > 2 ? w[(co0 + 2) * K + k] : 0.0f;
      const float w3 = nb > 3 ? w[(co0 + 3) * K + k] : 0.0f;
      for (int64_t p = 0; p < P; ++p) {
        const float v = c[p];
        a0[p] += w0 * v;
        a1[p] += w1 * v;
        a2[p] += w2 * v;
        a3[p] += w3 * v;
      }
    }
    for (int64_t b = 0; b < nb; ++b) {
      const float* a = acc.data() + b * P;
      float* o = out + (co0 + b) * out_stride;
      if (bias) {
        const float bv = bias[co0 + b];
        for (int64_t p = 0; p < P; ++p) o[p] = a[p] + bv;
      } else {
        std::copy(a, a + P, o);
      }
    }
  }
}

}  // namespace

ConvSpec ConvSpec::same(int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t dilation) {
  if (kernel % 2 == 0) throw ConfigError("same padding needs an odd kernel, got " + std::to_string(kernel));
  const int64_t pad = dilation * (kernel - 1) / 2;
  return ConvSpec{in_channels, out_channels, {kernel, kernel}, {1, 1}, {pad, pad}, dilation};
}

Hw ConvSpec::output_size(Hw input) const {
  return Hw{(input.h + 2 * padding.h - dilation * (kernel.h - 1) - 1) / stride.h + 1,
            (input.w + 2 * padding.w - dilation * (kernel.w - 1) - 1) / stride.w + 1};
}

Hw ConvSpec::receptive_field() const {
  return Hw{dilation * (kernel.h - 1) + 1, dilation * (kernel.w - 1) + 1};
}

void ConvSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw ConfigError("conv2d: channel counts must be positive");
  if (kernel.h <= 0 || kernel.w <= 0) throw ConfigError("conv2d: kernel size must be positive");
  if (stride.h <= 0 || stride.w <= 0) throw ConfigError("conv2d: stride must be positive");
  if (padding.h < 0 || padding.w < 0) throw ConfigError("conv2d: padding must be non-negative");
  if (dilation <= 0) throw ConfigError("conv2d: dilation must be positive");
}

Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& weight, const Tensor& bias) {
  spec.validate();
  const Shape& in = input.shape();
  if (in.c != spec.in_channels)
    throw ConfigError("conv2d: input channel dimension is " + std::to_string(in.c) + ", spec expects " +
                      std::to_string(spec.in_channels));
  if (weight.shape() != spec.weight_shape())
    throw ConfigError("conv2d: weight shape " + weight.shape().str() + " does not match (out_c, in_c, kh, kw) = " +
                      spec.weight_shape().str());
  if (bias.defined() && bias.numel() != spec.out_channels)
    throw ConfigError("conv2d: bias length " + std::to_string(bias.numel()) + " does not match out_channels " +
                      std::to_string(spec.out_channels));
  const Hw out = spec.output_size({in.h, in.w});
  if (out.h <= 0 || out.w <= 0)
    throw ConfigError("conv2d: input " + in.str() + " too small for the kernel's receptive field");

  const ConvGeometry g{spec, in, out};
  const int64_t K = g.k();
  const int64_t cout = spec.out_channels;
  const Shape out_shape{in.n, cout, out.h, out.w};
  std::vector<float> y(sz(out_shape.numel()));
  const float* x = input.data().data();
  const float* w = weight.data().data();
  const float* b = bias.defined() ? bias.data().data() : nullptr;
  const int64_t rows = tile_rows(out.w);
  std::vector<float> col;
  for (int64_t n = 0; n < in.n; ++n) {
    const float* xn = x + n * in.c * in.h * in.w;
    float* yn = y.data() + n * cout * out.h * out.w;
    for (int64_t oy0 = 0; oy0 < out.h; oy0 += rows) {
      const int64_t oy1 = std::min(out.h, oy0 + rows);
      im2col(g, xn, oy0, oy1, col);
      forward_tile(w, cout, K, col.data(), (oy1 - oy0) * out.w, yn + oy0 * out.w, out.h * out.w, b);
    }
  }

  return make_result(out_shape, std::move(y), {input, weight, bias},
                     [input, weight, bias, g](const std::vector<float>& gy) {
                       const Shape& in = g.in;
                       const int64_t K = g.k();
                       const int64_t cout = g.spec.out_channels;
                       const int64_t plane = g.out.h * g.out.w;
                       const bool want_x = input.requires_grad();
                       const bool want_w = weight.requires_grad();
                       const bool want_b = bias.defined() && bias.requires_grad();
                       std::vector<float> gx(want_x ? sz(in.numel()) : 0, 0.0f);
                       RowMatrix gw = RowMatrix::Zero(cout, K);
                       std::vector<double> gb(sz(cout), 0.0);
                       ConstMap wmat(weight.data().data(), cout, K);
                       const int64_t rows = tile_rows(g.out.w);
                       std::vector<float> col;
                       RowMatrix gcol;
                       for (int64_t n = 0; n < in.n; ++n) {
                         const float* xn = input.data().data() + n * in.c * in.h * in.w;
                         const float* gyn = gy.data() + n * cout * plane;
                         for (int64_t oy0 = 0; oy0 < g.out.h; oy0 += rows) {
                           const int64_t oy1 = std::min(g.out.h, oy0 + rows);
                           const int64_t P = (oy1 - oy0) * g.out.w;
                           ConstStridedMap gtile(gyn + oy0 * g.out.w, cout, P, Eigen::OuterStride<>(plane));
                           if (want_b)
                             for (int64_t co = 0; co < cout; ++co)
                               for (int64_t p = 0; p < P; ++p) gb[sz(co)] += gtile(co, p);
                           if (want_w) {
                             im2col(g, xn, oy0, oy1, col);
                             ConstMap cmat(col.data(), K, P);
                             gw.noalias() += gtile * cmat.transpose();
                           }
                           if (want_x) {
                             gcol.noalias() = wmat.transpose() * gtile;
                             col2im_add(g, gcol.data(), oy0, oy1, gx.data() + n * in.c * in.h * in.w);
                           }
                         }
                       }
                       if (want_x) {
                         if (testing::active_grad_fault() == testing::GradFault::flip_conv_input)
                           for (float& v : gx) v = -v;
                         accumulate_grad(input, gx);
                       }
                       if (want_w) accumulate_grad(weight, std::span<const float>(gw.data(), sz(gw.size())));
                       if (want_b) {
                         std::vector<float> gbf(gb.begin(), gb.end());
                         accumulate_grad(bias, gbf);
                       }
                     });
}

namespace {

struct Bins {
  std::vector<int64_t> start, end;
};

Bins adaptive_bins(int64_t in, int64_t out) {
  Bins b;
  for (int64_t i = 0; i < out; ++i) {
    b.start.push_back(i * in / out);
    b.end.push_back((i + 1) * in / out);
  }
  return b;
}

}  // namespace

Tensor adaptive_avg_pool2d(const Tensor& input, Hw out) {
  const Shape& in = input.shape();
  if (out.h <= 0 || out.w <= 0) throw ConfigError("adaptive_avg_pool2d: output grid must be at least 1x1");
  if (out.h > in.h || out.w > in.w)
    throw ConfigError("adaptive_avg_pool2d: output grid " + std::to_string(out.h) + "x" + std::to_string(out.w) +
                      " larger than input " + std::to_string(in.h) + "x" + std::to_string(in.w));
  const Bins by = adaptive_bins(in.h, out.h);
  const Bins bx = adaptive_bins(in.w, out.w);
  const Shape os{in.n, in.c, out.h, out.w};
  std::vector<float> y(sz(os.numel()));
  const float* x = input.data().data();
  for (int64_t nc = 0; nc < in.n * in.c; ++nc) {
    const float* plane = x + nc * in.h * in.w;
    for (int64_t i = 0; i < out.h; ++i) {
      for (int64_t j = 0; j < out.w; ++j) {
        double s = 0.0;
        for (int64_t r = by.start[sz(i)]; r < by.end[sz(i)]; ++r)
          for (int64_t c = bx.start[sz(j)]; c < bx.end[sz(j)]; ++c) s += plane[r * in.w + c];
        const double count = static_cast<double>((by.end[sz(i)] - by.start[sz(i)]) * (bx.end[sz(j)] - bx.start[sz(j)]));
        y[sz((nc * out.h + i) * out.w + j)] = static_cast<float>(s / count);
      }
    }
  }
  return make_result(os, std::move(y), {input}, [input, by, bx, in, out](const std::vector<float>& gy) {
    std::vector<float> gx(sz(in.numel()), 0.0f);
    for (int64_t nc = 0; nc < in.n * in.c; ++nc) {
      float* plane = gx.data() + nc * in.h * in.w;
      for (int64_t i = 0; i < out.h; ++i) {
        for (int64_t j = 0; j < out.w; ++j) {
          const int64_t count = (by.end[sz(i)] - by.start[sz(i)]) * (bx.end[sz(j)] - bx.start[sz(j)]);
          const float gv = gy[sz((nc * out.h + i) * out.w + j)] / static_cast<float>(count);
          for (int64_t r = by.start[sz(i)]; r < by.end[sz(i)]; ++r)
            for (int64_t c = bx.start[sz(j)]; c < bx.end[sz(j)]; ++c) plane[r * in.w + c] += gv;
        }
      }
    }
    accumulate_grad(input, gx);
  });
}

namespace {

struct Taps {
  std::vector<int64_t> lo, hi;
  std::vector<float> frac;  // weight of hi
};

Taps bilinear_taps(int64_t in, int64_t out) {
  Taps t;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int64_t lo = static_cast<int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int64_t hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(static_cast<float>(src - static_cast<double>(lo)));
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& input, Hw out) {
  const Shape& in = input.shape();
  if (out.h <= 0 || out.w <= 0) throw ConfigError("upsample_bilinear: output size must be positive");
  if (out.h < in.h || out.w < in.w)
    throw ConfigError("upsample_bilinear: target " + std::to_string(out.h) + "x" + std::to_string(out.w) +
                      " smaller than input " + std::to_string(in.h) + "x" + std::to_string(in.w));
  const Taps ty = bilinear_taps(in.h, out.h);
  const Taps tx = bilinear_taps(in.w, out.w);
  const Shape os{in.n, in.c, out.h, out.w};
  std::vector<float> y(sz(os.numel()));
  const float* x = input.data().data();
  for (int64_t nc = 0; nc < in.n * in.c; ++nc) {
    const float* plane = x + nc * in.h * in.w;
    float* dst = y.data() + nc * out.h * out.w;
    for (int64_t i = 0; i < out.h; ++i) {
      const float ly = ty.frac[sz(i)];
      const float* r0 = plane + ty.lo[sz(i)] * in.w;
      const float* r1 = plane + ty.hi[sz(i)] * in.w;
      for (int64_t j = 0; j < out.w; ++j) {
        const float lx = tx.frac[sz(j)];
        const int64_t c0 = tx.lo[sz(j)], c1 = tx.hi[sz(j)];
        const float top = (1.0f - lx) * r0[c0] + lx * r0[c1];
        const float bottom = (1.0f - lx) * r1[c0] + lx * r1[c1];
        dst[i * out.w + j] = (1.0f - ly) * top + ly * bottom;
      }
    }
  }
  return make_result(os, std::move(y), {input}, [input, ty, tx, in, out](const std::vector<float>& gy) {
    std::vector<float> gx(sz(in.numel()), 0.0f);
    for (int64_t nc = 0; nc < in.n * in.c; ++nc) {
      float* plane = gx.data() + nc * in.h * in.w;
      const float* src = gy.data() + nc * out.h * out.w;
      for (int64_t i = 0; i < out.h; ++i) {
        const float ly = ty.frac[sz(i)];
        float* r0 = plane + ty.lo[sz(i)] * in.w;
        float* r1 = plane + ty.hi[sz(i)] * in.w;
        for (int64_t j = 0; j < out.w; ++j) {
          const float lx = tx.frac[sz(j)];
          const int64_t c0 = tx.lo[sz(j)], c1 = tx.hi[sz(j)];
          const float gv = src[i * out.w + j];
          const float gt = (1.0f - ly) * gv;
          const float gb = ly * gv;
          r0[c0] += (1.0f - lx) * gt;
          r0[c1] += lx * gt;
          r1[c0] += (1.0f - lx) * gb;
          r1[c1] += lx * gb;
        }
      }
    }
    accumulate_grad(input, gx);
  });
}

RunningStats RunningStats::unrecorded(int64_t channels) {
  return RunningStats{std::vector<float>(sz(channels), 0.0f), std::vector<float>(sz(channels), 1.0f), false};
}

RunningStats RunningStats::defaults(int64_t channels) {
  RunningStats s = unrecorded(channels);
  s.recorded = true;
  return s;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats, Mode mode,
                   const BatchNormOptions& options) {
  const Shape& in = input.shape();
  if (gamma.numel() != in.c || beta.numel() != in.c)
    throw ConfigError("batchnorm2d: gamma/beta length must equal channel count " + std::to_string(in.c));
  if (static_cast<int64_t>(stats.mean.size()) != in.c || static_cast<int64_t>(stats.var.size()) != in.c)
    throw ConfigError("batchnorm2d: running statistics sized for " + std::to_string(stats.mean.size()) +
                      " channels, input has " + std::to_string(in.c));
  if (mode == Mode::eval && !stats.recorded)
    throw ConfigError("batchnorm2d: eval mode requested before any running statistics were recorded");

  const int64_t C = in.c;
  const int64_t plane = in.h * in.w;
  const int64_t M = in.n * plane;
  const float* x = input.data().data();
  std::vector<float> mean_f(sz(C)), inv_std(sz(C));
  for (int64_t c = 0; c < C; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (int64_t n = 0; n < in.n; ++n)
        for (int64_t p = 0; p < plane; ++p) s += x[(n * C + c) * plane + p];
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (int64_t n = 0; n < in.n; ++n)
        for (int64_t p = 0; p < plane; ++p) {
          const double d = x[(n * C + c) * plane + p] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(M);
      mean_f[sz(c)] = static_cast<float>(mu);
      inv_std[sz(c)] = 1.0f / std::sqrt(static_cast<float>(var) + options.eps);
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      const float m = options.momentum;
      stats.mean[sz(c)] = (1.0f - m) * stats.mean[sz(c)] + m * static_cast<float>(mu);
      stats.var[sz(c)] = (1.0f - m) * stats.var[sz(c)] + m * static_cast<float>(unbiased);
    } else {
      mean_f[sz(c)] = stats.mean[sz(c)];
      inv_std[sz(c)] = 1.0f / std::sqrt(stats.var[sz(c)] + options.eps);
    }
  }
  if (mode == Mode::train) stats.recorded = true;

  const float* gm = gamma.data().data();
  const float* bt = beta.data().data();
  std::vector<float> y(sz(in.numel()));
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float mu = mean_f[sz(c)], is = inv_std[sz(c)], g = gm[c], b = bt[c];
      const int64_t base = (n * C + c) * plane;
      for (int64_t p = 0; p < plane; ++p) y[sz(base + p)] = g * ((x[base + p] - mu) * is) + b;
    }

  return make_result(in, std::move(y), {input, gamma, beta},
                     [input, gamma, beta, mean_f, inv_std, mode](const std::vector<float>& gy) {
                       const Shape& in = input.shape();
                       const int64_t C = in.c;
                       const int64_t plane = in.h * in.w;
                       const double M = static_cast<double>(in.n * plane);
                       const float* x = input.data().data();
                       std::vector<float> gx(sz(in.numel()), 0.0f), gg(sz(C)), gb(sz(C));
                       for (int64_t c = 0; c < C; ++c) {
                         const float mu = mean_f[sz(c)], is = inv_std[sz(c)];
                         double sdy = 0.0, sdyx = 0.0;
                         for (int64_t n = 0; n < in.n; ++n)
                           for (int64_t p = 0; p < plane; ++p) {
                             const int64_t i = (n * C + c) * plane + p;
                             const double xhat = (x[i] - mu) * is;
                             sdy += gy[sz(i)];
                             sdyx += gy[sz(i)] * xhat;
                           }
                         gg[sz(c)] = static_cast<float>(sdyx);
                         gb[sz(c)] = static_cast<float>(sdy);
                         const double g = gamma.data()[sz(c)];
                         for (int64_t n = 0; n < in.n; ++n)
                           for (int64_t p = 0; p < plane; ++p) {
                             const int64_t i = (n * C + c) * plane + p;
                             if (mode == Mode::train) {
                               const double xhat = (x[i] - mu) * is;
                               gx[sz(i)] = static_cast<float>(g * is / M * (M * gy[sz(i)] - sdy - xhat * sdyx));
                             } else {
                               gx[sz(i)] = static_cast<float>(g * is * gy[sz(i)]);
                             }
                           }
                       }
                       accumulate_grad(input, gx);
                       accumulate_grad(gamma, gg);
                       accumulate_grad(beta, gb);
                     });
}

Tensor relu(const Tensor& input) {
  // max(NaN, 0) would hide the NaN.
  check_finite(input.data(), "relu input");
  std::vector<float> y(input.data().begin(), input.data().end());
  std::vector<uint8_t> on(y.size());
  const int64_t* forced = testing::take_branches(y.size());
  for (size_t i = 0; i < y.size(); ++i) {
    on[i] = forced ? forced[i] != 0 : y[i] > 0.0f;
    if (!on[i]) y[i] = 0.0f;
  }
  if (auto* sink = testing::branch_sink()) sink->insert(sink->end(), on.begin(), on.end());
  return make_result(input.shape(), std::move(y), {input}, [input, on](const std::vector<float>& gy) {
    std::vector<float> gx(gy.size());
    // Subgradient at exactly 0 is 0.
    for (size_t i = 0; i < gy.size(); ++i) gx[i] = on[i] ? gy[i] : 0.0f;
    accumulate_grad(input, gx);
  });
}

Tensor sigmoid(const Tensor& input) {
  std::vector<float> y(input.data().begin(), input.data().end());
  for (float& v : y) v = 1.0f / (1.0f + std::exp(-v));
  auto out = std::make_shared<std::vector<float>>(y);
  return make_result(input.shape(), std::move(y), {input}, [input, out](const std::vector<float>& gy) {
    std::vector<float> gx(gy.size());
    const float sign = testing::active_grad_fault() == testing::GradFault::flip_sigmoid ? -1.0f : 1.0f;
    for (size_t i = 0; i < gy.size(); ++i) {
      const float s = (*out)[i];
      gx[i] = sign * gy[i] * s * (1.0f - s);
    }
    accumulate_grad(input, gx);
  });
}

Tensor maxpool2d(const Tensor& input) {
  check_finite(input.data(), "maxpool2d input");
  const Shape& in = input.shape();
  if (in.h < 2 || in.w < 2) throw ConfigError("maxpool2d: input " + in.str() + " smaller than the 2x2 window");
  const Shape os{in.n, in.c, in.h / 2, in.w / 2};
  std::vector<float> y(sz(os.numel()));
  std::vector<int64_t> argmax(sz(os.numel()));
  const float* x = input.data().data();
  const int64_t* forced = testing::take_branches(y.size());
  for (int64_t nc = 0; nc < in.n * in.c; ++nc) {
    const int64_t base = nc * in.h * in.w;
    for (int64_t i = 0; i < os.h; ++i)
      for (int64_t j = 0; j < os.w; ++j) {
        int64_t best = base + (2 * i) * in.w + 2 * j;
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx) {
            const int64_t idx = base + (2 * i + dy) * in.w + 2 * j + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const int64_t o = (nc * os.h + i) * os.w + j;
        if (forced) best = forced[o];
        y[sz(o)] = x[best];
        argmax[sz(o)] = best;
      }
  }
  if (auto* sink = testing::branch_sink()) sink->insert(sink->end(), argmax.begin(), argmax.end());
  return make_result(os, std::move(y), {input}, [input, argmax](const std::vector<float>& gy) {
    std::vector<float> gx(sz(input.numel()), 0.0f);
    for (size_t o = 0; o < gy.size(); ++o) gx[sz(argmax[o])] += gy[o];
    accumulate_grad(input, gx);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> y(sz(a.numel()));
  auto da = a.data(), db = b.data();
  for (size_t i = 0; i < y.size(); ++i) y[i] = da[i] + db[i];
  return make_result(a.shape(), std::move(y), {a, b}, [a, b](const std::vector<float>& gy) {
    accumulate_grad(a, gy);
    accumulate_grad(b, gy);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> y(sz(a.numel()));
  auto da = a.data(), db = b.data();
  for (size_t i = 0; i < y.size(); ++i) y[i] = da[i] - db[i];
  return make_result(a.shape(), std::move(y), {a, b}, [a, b](const std::vector<float>& gy) {
    accumulate_grad(a, gy);
    if (b.requires_grad()) {
      std::vector<float> neg(gy.size());
      for (size_t i = 0; i < gy.size(); ++i) neg[i] = -gy[i];
      accumulate_grad(b, neg);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> y(sz(a.numel()));
  auto da = a.data(), db = b.data();
  for (size_t i = 0; i < y.size(); ++i) y[i] = da[i] * db[i];
  return make_result(a.shape(), std::move(y), {a, b}, [a, b](const std::vector<float>& gy) {
    auto da = a.data(), db = b.data();
    std::vector<float> g(gy.size());
    if (a.requires_grad()) {
      for (size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * db[i];
      accumulate_grad(a, g);
    }
    if (b.requires_grad()) {
      for (size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * da[i];
      accumulate_grad(b, g);
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> y(a.data().begin(), a.data().end());
  for (float& v : y) v *= factor;
  return make_result(a.shape(), std::move(y), {a}, [a, factor](const std::vector<float>& gy) {
    std::vector<float> g(gy);
    for (float& v : g) v *= factor;
    accumulate_grad(a, g);
  });
}

Tensor add_scalar(const Tensor& a, float value) {
  std::vector<float> y(a.data().begin(), a.data().end());
  for (float& v : y) v += value;
  return make_result(a.shape(), std::move(y), {a}, [a](const std::vector<float>& gy) { accumulate_grad(a, gy); });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ConfigError("concat_channels: N/H/W mismatch " + sa.str() + " vs " + sb.str());
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  const int64_t pa = sa.c * sa.h * sa.w, pb = sb.c * sb.h * sb.w;
  std::vector<float> y(sz(os.numel()));
  for (int64_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.data().data() + n * pa, pa, y.data() + n * (pa + pb));
    std::copy_n(b.data().data() + n * pb, pb, y.data() + n * (pa + pb) + pa);
  }
  return make_result(os, std::move(y), {a, b}, [a, b, pa, pb](const std::vector<float>& gy) {
    const int64_t N = a.shape().n;
    std::vector<float> ga(sz(N * pa)), gb(sz(N * pb));
    for (int64_t n = 0; n < N; ++n) {
      std::copy_n(gy.data() + n * (pa + pb), pa, ga.data() + n * pa);
      std::copy_n(gy.data() + n * (pa + pb) + pa, pb, gb.data() + n * pb);
    }
    accumulate_grad(a, ga);
    accumulate_grad(b, gb);
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  return make_result(Shape{}, {static_cast<float>(s)}, {a}, [a](const std::vector<float>& gy) {
    accumulate_grad(a, std::vector<float>(sz(a.numel()), gy[0]));
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

Tensor weighted_sum(const Tensor& a, const Tensor& weights) {
  require_same_shape(a, weights, "weighted_sum");
  double s = 0.0;
  auto da = a.data(), dw = weights.data();
  for (size_t i = 0; i < da.size(); ++i) s += static_cast<double>(da[i]) * dw[i];
  return make_result(Shape{}, {static_cast<float>(s)}, {a}, [a, weights](const std::vector<float>& gy) {
    std::vector<float> g(weights.data().begin(), weights.data().end());
    for (float& v : g) v *= gy[0];
    accumulate_grad(a, g);
  });
}

Tensor pad_zero(const Tensor& input, int64_t bottom, int64_t right) {
  if (bottom < 0 || right < 0) throw ConfigError("pad_zero: padding must be non-negative");
  if (bottom == 0 && right == 0) return input;
  const Shape& in = input.shape();
  const Shape os{in.n, in.c, in.h + bottom, in.w + right};
  std::vector<float> y(sz(os.numel()), 0.0f);
  for (int64_t nc = 0; nc < in.n * in.c; ++nc)
    for (int64_t r = 0; r < in.h; ++r)
      std::copy_n(input.data().data() + (nc * in.h + r) * in.w, in.w, y.data() + (nc * os.h + r) * os.w);
  return make_result(os, std::move(y), {input}, [input, os](const std::vector<float>& gy) {
    const Shape& in = input.shape();
    std::vector<float> gx(sz(in.numel()));
    for (int64_t nc = 0; nc < in.n * in.c; ++nc)
      for (int64_t r = 0; r < in.h; ++r)
        std::copy_n(gy.data() + (nc * os.h + r) * os.w, in.w, gx.data() + (nc * in.h + r) * in.w);
    accumulate_grad(input, gx);
  });
}

Tensor crop(const Tensor& input, Hw size) {
  const Shape& in = input.shape();
  if (size.h <= 0 || size.w <= 0 || size.h > in.h || size.w > in.w)
    throw ConfigError("crop: window " + std::to_string(size.h) + "x" + std::to_string(size.w) +
                      " does not fit input " + in.str());
  if (size.h == in.h && size.w == in.w) return input;
  const Shape os{in.n, in.c, size.h, size.w};
  std::vector<float> y(sz(os.numel()));
  for (int64_t nc = 0; nc < in.n * in.c; ++nc)
    for (int64_t r = 0; r < os.h; ++r)
      std::copy_n(input.data().data() + (nc * in.h + r) * in.w, os.w, y.data() + (nc * os.h + r) * os.w);
  return make_result(os, std::move(y), {input}, [input, os](const std::vector<float>& gy) {
    const Shape& in = input.shape();
    std::vector<float> gx(sz(in.numel()), 0.0f);
    for (int64_t nc = 0; nc < in.n * in.c; ++nc)
      for (int64_t r = 0; r < os.h; ++r)
        std::copy_n(gy.data() + (nc * os.h + r) * os.w, os.w, gx.data() + (nc * in.h + r) * in.w);
    accumulate_grad(input, gx);
  });
}

}  // namespace mslae
