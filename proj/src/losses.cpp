#include "mslae/losses.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>

#include "mslae/error.hpp"
#include "mslae/ops.hpp"

namespace mslae {

namespace {

constexpr double kSmooth = 1.0;
constexpr double kClamp = 1e-7;

void require_same_shape(const Tensor& p, const Tensor& g, const char* what) {
  if (p.shape() != g.shape())
    throw ConfigError(std::string(what) + ": prediction " + p.shape().str() + " and target " + g.shape().str() +
                      " differ in shape");
}

void require_binary(const Tensor& g, const char* what) {
  for (float v : g.data())
    if (v != 0.0f && v != 1.0f) throw ConfigError(std::string(what) + ": target must be binary (0/1)");
}

// FFTW planning is not thread-safe; execution on distinct buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class Dft2d {
 public:
  Dft2d(int64_t h, int64_t w) : h_(h), w_(w) {
    const size_t n = static_cast<size_t>(h * w);
    buf_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
    std::lock_guard lock(fftw_planner_mutex());
    fwd_ = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf_, buf_, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  ~Dft2d() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(buf_);
  }
  Dft2d(const Dft2d&) = delete;
  Dft2d& operator=(const Dft2d&) = delete;

  std::complex<double>* data() { return reinterpret_cast<std::complex<double>*>(buf_); }
  // Unitary transforms (scaled by 1/sqrt(HW)).
  void forward() { run(fwd_); }
  void inverse() { run(bwd_); }

 private:
  void run(fftw_plan plan) {
    fftw_execute(plan);
    const double s = 1.0 / std::sqrt(static_cast<double>(h_ * w_));
    auto* d = data();
    for (int64_t i = 0; i < h_ * w_; ++i) d[i] *= s;
  }

  int64_t h_, w_;
  fftw_complex* buf_ = nullptr;
  fftw_plan fwd_ = nullptr;
  fftw_plan bwd_ = nullptr;
};

// 1 / (2 (|k| + eps)) with the DC term zeroed.
std::vector<double> spectral_weights(int64_t h, int64_t w, double eps) {
  std::vector<double> weights(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y) {
    const double ky = static_cast<double>(y <= h / 2 ? y : y - h);
    for (int64_t x = 0; x < w; ++x) {
      const double kx = static_cast<double>(x <= w / 2 ? x : x - w);
      const double radius = std::sqrt(ky * ky + kx * kx);
      weights[static_cast<size_t>(y * w + x)] = (y == 0 && x == 0) ? 0.0 : 1.0 / (2.0 * (radius + eps));
    }
  }
  return weights;
}

}  // namespace

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::ei: return "ei";
    case LossKind::dice: return "dice";
    case LossKind::bce: return "bce";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& text) {
  if (text == "ei") return LossKind::ei;
  if (text == "dice") return LossKind::dice;
  if (text == "bce") return LossKind::bce;
  throw ConfigError("unknown loss kind '" + text + "' (expected ei, dice or bce)");
}

void LossConfig::validate() const {
  if (!(alpha > 0.0f)) throw ConfigError("loss: alpha must be > 0");
  if (!(beta > 0.0f)) throw ConfigError("loss: beta must be > 0");
  if (!(ei_epsilon >= 0.0)) throw ConfigError("loss: ei_epsilon must be >= 0");
}

Tensor smoothed_heaviside(const Tensor& x, float beta) {
  if (!(beta > 0.0f)) throw ConfigError("smoothed_heaviside: beta must be > 0");
  std::vector<float> y(x.data().begin(), x.data().end());
  // -1 saturated low, 0 linear band, 1 saturated high.
  std::vector<int64_t> band(y.size());
  const int64_t* forced = testing::take_branches(y.size());
  for (size_t i = 0; i < y.size(); ++i) {
    const float t = y[i] / beta;
    band[i] = forced ? forced[i] : (t <= -1.0f ? -1 : t >= 1.0f ? 1 : 0);
    y[i] = 0.5f * ((band[i] == 0 ? t : static_cast<float>(band[i])) + 1.0f);
  }
  if (auto* sink = testing::branch_sink()) sink->insert(sink->end(), band.begin(), band.end());
  return make_result(x.shape(), std::move(y), {x}, [x, beta, band](const std::vector<float>& gy) {
    std::vector<float> gx(gy.size());
    const float slope = 0.5f / beta;
    for (size_t i = 0; i < gy.size(); ++i) gx[i] = band[i] == 0 ? gy[i] * slope : 0.0f;
    accumulate_grad(x, gx);
  });
}

Tensor spectral_energy(const Tensor& field, double eps) {
  const Shape& s = field.shape();
  const std::vector<double> weights = spectral_weights(s.h, s.w, eps);
  const int64_t plane = s.h * s.w;
  Dft2d dft(s.h, s.w);
  double total = 0.0;
  auto d = field.data();
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    auto* buf = dft.data();
    for (int64_t i = 0; i < plane; ++i) buf[i] = {static_cast<double>(d[static_cast<size_t>(nc * plane + i)]), 0.0};
    dft.forward();
    for (int64_t i = 0; i < plane; ++i) total += weights[static_cast<size_t>(i)] * std::norm(buf[i]);
  }
  const double batch = static_cast<double>(s.n);
  return make_result(Shape{}, {static_cast<float>(total / batch)}, {field},
                     [field, weights, batch](const std::vector<float>& gy) {
                       const Shape& s = field.shape();
                       const int64_t plane = s.h * s.w;
                       Dft2d dft(s.h, s.w);
                       auto d = field.data();
                       std::vector<float> gx(static_cast<size_t>(s.numel()));
                       // dE/dd = 2 Re(IDFT(w * D)) for symmetric weights.
                       const double factor = 2.0 * gy[0] / batch;
                       for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                         auto* buf = dft.data();
                         for (int64_t i = 0; i < plane; ++i)
                           buf[i] = {static_cast<double>(d[static_cast<size_t>(nc * plane + i)]), 0.0};
                         dft.forward();
                         for (int64_t i = 0; i < plane; ++i) buf[i] *= weights[static_cast<size_t>(i)];
                         dft.inverse();
                         for (int64_t i = 0; i < plane; ++i)
                           gx[static_cast<size_t>(nc * plane + i)] = static_cast<float>(factor * buf[i].real());
                       }
                       accumulate_grad(field, gx);
                     });
}

Tensor ei_loss(const Tensor& prediction, const Tensor& target, const LossConfig& config) {
  config.validate();
  require_same_shape(prediction, target, "ei_loss");
  require_binary(target, "ei_loss");
  Tensor centered = add_scalar(scale(prediction, 2.0f), -1.0f);
  Tensor field = sub(scale(smoothed_heaviside(centered, config.beta), config.alpha), target);
  return spectral_energy(field, config.ei_epsilon);
}

Tensor dice_loss(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "dice_loss");
  auto p = prediction.data();
  auto g = target.data();
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double num = 2.0 * inter + kSmooth;
  const double den = sp + sg + kSmooth;
  return make_result(Shape{}, {static_cast<float>(1.0 - num / den)}, {prediction},
                     [prediction, target, num, den](const std::vector<float>& gy) {
                       auto g = target.data();
                       std::vector<float> gp(g.size());
                       for (size_t i = 0; i < g.size(); ++i)
                         gp[i] = static_cast<float>(gy[0] * -(2.0 * g[i] * den - num) / (den * den));
                       accumulate_grad(prediction, gp);
                     });
}

Tensor bce_loss(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "bce_loss");
  auto p = prediction.data();
  auto g = target.data();
  double total = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), kClamp, 1.0 - kClamp);
    total += -(g[i] * std::log(pc) + (1.0 - g[i]) * std::log(1.0 - pc));
  }
  const double count = static_cast<double>(p.size());
  return make_result(Shape{}, {static_cast<float>(total / count)}, {prediction},
                     [prediction, target, count](const std::vector<float>& gy) {
                       auto p = prediction.data();
                       auto g = target.data();
                       std::vector<float> gp(p.size(), 0.0f);
                       for (size_t i = 0; i < p.size(); ++i) {
                         const double pv = p[i];
                         if (pv <= kClamp || pv >= 1.0 - kClamp) continue;
                         gp[i] = static_cast<float>(gy[0] * (-g[i] / pv + (1.0 - g[i]) / (1.0 - pv)) / count);
                       }
                       accumulate_grad(prediction, gp);
                     });
}

Tensor compute_loss(const Tensor& prediction, const Tensor& target, const LossConfig& config) {
  switch (config.kind) {
    case LossKind::ei: return ei_loss(prediction, target, config);
    case LossKind::dice: return dice_loss(prediction, target);
    case LossKind::bce: return bce_loss(prediction, target);
  }
  throw ConfigError("unknown loss kind");
}

}  // namespace mslae
