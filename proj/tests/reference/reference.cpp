#include "reference.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

namespace mslae::reference {

namespace {

void same_dims(const Grid& a, const Grid& b) {
  if (a.n != b.n || a.c != b.c || a.h != b.h || a.w != b.w) throw std::invalid_argument("reference: dims differ");
}

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

Grid from_tensor(const Tensor& t) {
  const Shape& s = t.shape();
  Grid g(s.n, s.c, s.h, s.w);
  std::copy(t.data().begin(), t.data().end(), g.v.begin());
  return g;
}

Grid conv(const Grid& x, const Grid& weight, const std::vector<float>& bias, int64_t dilation, int64_t pad) {
  const int64_t kh = weight.h, kw = weight.w;
  const int64_t oh = x.h + 2 * pad - dilation * (kh - 1);
  const int64_t ow = x.w + 2 * pad - dilation * (kw - 1);
  Grid y(x.n, weight.n, oh, ow);
  for (int64_t i = 0; i < x.n; ++i)
    for (int64_t co = 0; co < weight.n; ++co)
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          float acc = 0.0f;
          for (int64_t ci = 0; ci < x.c; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy - pad + ky * dilation;
                const int64_t ix = ox - pad + kx * dilation;
                const bool inside = iy >= 0 && iy < x.h && ix >= 0 && ix < x.w;
                acc += weight.at(co, ci, ky, kx) * (inside ? x.at(i, ci, iy, ix) : 0.0f);
              }
          y.at(i, co, oy, ox) = bias.empty() ? acc : acc + bias[static_cast<size_t>(co)];
        }
  return y;
}

Grid avg_pool(const Grid& x, int64_t oh, int64_t ow) {
  Grid y(x.n, x.c, oh, ow);
  for (int64_t i = 0; i < x.n; ++i)
    for (int64_t ch = 0; ch < x.c; ++ch)
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t q = 0; q < ow; ++q) {
          const int64_t y0 = r * x.h / oh, y1 = (r + 1) * x.h / oh;
          const int64_t x0 = q * x.w / ow, x1 = (q + 1) * x.w / ow;
          double s = 0.0;
          for (int64_t yy = y0; yy < y1; ++yy)
            for (int64_t xx = x0; xx < x1; ++xx) s += x.at(i, ch, yy, xx);
          y.at(i, ch, r, q) = static_cast<float>(s / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
  return y;
}

namespace {

// Half-pixel source coordinate, clamped to the first sample.
struct Tap {
  int64_t lo, hi;
  float frac;
};

Tap tap(int64_t i, int64_t in, int64_t out) {
  double src = (static_cast<double>(i) + 0.5) * (static_cast<double>(in) / static_cast<double>(out)) - 0.5;
  src = std::max(src, 0.0);
  const int64_t lo = std::min(static_cast<int64_t>(std::floor(src)), in - 1);
  return {lo, std::min(lo + 1, in - 1), static_cast<float>(src - static_cast<double>(lo))};
}

}  // namespace

Grid bilinear(const Grid& x, int64_t oh, int64_t ow) {
  Grid y(x.n, x.c, oh, ow);
  for (int64_t i = 0; i < x.n; ++i)
    for (int64_t ch = 0; ch < x.c; ++ch)
      for (int64_t r = 0; r < oh; ++r) {
        const Tap ty = tap(r, x.h, oh);
        for (int64_t q = 0; q < ow; ++q) {
          const Tap tx = tap(q, x.w, ow);
          const float top = (1.0f - tx.frac) * x.at(i, ch, ty.lo, tx.lo) + tx.frac * x.at(i, ch, ty.lo, tx.hi);
          const float bottom = (1.0f - tx.frac) * x.at(i, ch, ty.hi, tx.lo) + tx.frac * x.at(i, ch, ty.hi, tx.hi);
          y.at(i, ch, r, q) = (1.0f - ty.frac) * top + ty.frac * bottom;
        }
      }
  return y;
}

Grid max_pool(const Grid& x) {
  Grid y(x.n, x.c, x.h / 2, x.w / 2);
  for (int64_t i = 0; i < x.n; ++i)
    for (int64_t ch = 0; ch < x.c; ++ch)
      for (int64_t r = 0; r < y.h; ++r)
        for (int64_t q = 0; q < y.w; ++q)
          y.at(i, ch, r, q) = std::max({x.at(i, ch, 2 * r, 2 * q), x.at(i, ch, 2 * r, 2 * q + 1),
                                        x.at(i, ch, 2 * r + 1, 2 * q), x.at(i, ch, 2 * r + 1, 2 * q + 1)});
  return y;
}

Grid relu(const Grid& x) {
  Grid y = x;
  for (float& v : y.v) v = v > 0.0f ? v : 0.0f;
  return y;
}

Grid sigmoid(const Grid& x) {
  Grid y = x;
  for (float& v : y.v) v = 1.0f / (1.0f + std::exp(-v));
  return y;
}

Grid add(const Grid& a, const Grid& b) {
  same_dims(a, b);
  Grid y = a;
  for (size_t k = 0; k < y.v.size(); ++k) y.v[k] = a.v[k] + b.v[k];
  return y;
}

Grid mul(const Grid& a, const Grid& b) {
  same_dims(a, b);
  Grid y = a;
  for (size_t k = 0; k < y.v.size(); ++k) y.v[k] = a.v[k] * b.v[k];
  return y;
}

Grid concat(const Grid& a, const Grid& b) {
  Grid y(a.n, a.c + b.c, a.h, a.w);
  for (int64_t i = 0; i < a.n; ++i)
    for (int64_t ch = 0; ch < y.c; ++ch)
      for (int64_t r = 0; r < a.h; ++r)
        for (int64_t q = 0; q < a.w; ++q) y.at(i, ch, r, q) = ch < a.c ? a.at(i, ch, r, q) : b.at(i, ch - a.c, r, q);
  return y;
}

Grid pad(const Grid& x, int64_t bottom, int64_t right) {
  Grid y(x.n, x.c, x.h + bottom, x.w + right);
  for (int64_t i = 0; i < x.n; ++i)
    for (int64_t ch = 0; ch < x.c; ++ch)
      for (int64_t r = 0; r < x.h; ++r)
        for (int64_t q = 0; q < x.w; ++q) y.at(i, ch, r, q) = x.at(i, ch, r, q);
  return y;
}

Grid crop(const Grid& x, int64_t h, int64_t w) {
  Grid y(x.n, x.c, h, w);
  for (int64_t i = 0; i < x.n; ++i)
    for (int64_t ch = 0; ch < x.c; ++ch)
      for (int64_t r = 0; r < h; ++r)
        for (int64_t q = 0; q < w; ++q) y.at(i, ch, r, q) = x.at(i, ch, r, q);
  return y;
}

Grid batch_norm(const Grid& x, const std::vector<float>& gamma, const std::vector<float>& beta, Stats& stats,
                bool train) {
  constexpr float eps = 1e-5f, momentum = 0.1f;
  Grid y = x;
  const double count = static_cast<double>(x.n * x.h * x.w);
  for (int64_t ch = 0; ch < x.c; ++ch) {
    const size_t k = static_cast<size_t>(ch);
    float mu, inv;
    if (train) {
      double s = 0.0;
      for (int64_t i = 0; i < x.n; ++i)
        for (int64_t r = 0; r < x.h; ++r)
          for (int64_t q = 0; q < x.w; ++q) s += x.at(i, ch, r, q);
      const double m = s / count;
      double ss = 0.0;
      for (int64_t i = 0; i < x.n; ++i)
        for (int64_t r = 0; r < x.h; ++r)
          for (int64_t q = 0; q < x.w; ++q) ss += (x.at(i, ch, r, q) - m) * (x.at(i, ch, r, q) - m);
      mu = static_cast<float>(m);
      inv = 1.0f / std::sqrt(static_cast<float>(ss / count) + eps);
      const double unbiased = count > 1 ? ss / (count - 1) : ss / count;
      stats.mean[k] = (1.0f - momentum) * stats.mean[k] + momentum * static_cast<float>(m);
      stats.var[k] = (1.0f - momentum) * stats.var[k] + momentum * static_cast<float>(unbiased);
    } else {
      mu = stats.mean[k];
      inv = 1.0f / std::sqrt(stats.var[k] + eps);
    }
    for (int64_t i = 0; i < x.n; ++i)
      for (int64_t r = 0; r < x.h; ++r)
        for (int64_t q = 0; q < x.w; ++q) y.at(i, ch, r, q) = gamma[k] * ((x.at(i, ch, r, q) - mu) * inv) + beta[k];
  }
  return y;
}

Params::Params(const ParameterSet& set) : set_(set) {
  for (const auto& e : set.stats()) stats_[e.name] = Stats{e.stats->mean, e.stats->var};
}

Grid Params::weight(const std::string& conv) const {
  const auto* e = set_.find(conv + ".weight");
  if (!e) throw std::invalid_argument("reference: no parameter " + conv + ".weight");
  return from_tensor(e->value);
}

std::vector<float> Params::vec(const std::string& name) const {
  const auto* e = set_.find(name);
  if (!e) throw std::invalid_argument("reference: no parameter " + name);
  return {e->value.data().begin(), e->value.data().end()};
}

Stats& Params::stats(const std::string& bn) {
  auto it = stats_.find(bn);
  if (it == stats_.end()) throw std::invalid_argument("reference: no statistics " + bn);
  return it->second;
}

Grid conv_layer(Params& p, const std::string& name, const Grid& x, int64_t dilation) {
  const Grid w = p.weight(name);
  const std::vector<float> b = p.has(name + ".bias") ? p.vec(name + ".bias") : std::vector<float>{};
  return conv(x, w, b, dilation, dilation * (w.h - 1) / 2);
}

Grid conv_bn_relu(Params& p, const std::string& name, const Grid& x, bool train) {
  const Grid c = conv_layer(p, name + ".conv", x);
  return relu(batch_norm(c, p.vec(name + ".bn.gamma"), p.vec(name + ".bn.beta"), p.stats(name + ".bn"), train));
}

Grid conv_block(Params& p, const std::string& name, const Grid& x, bool train) {
  return conv_bn_relu(p, name + ".1", conv_bn_relu(p, name + ".0", x, train), train);
}

Grid ddpp(Params& p, const std::string& name, const Grid& x, int64_t dilation) {
  Grid b1 = bilinear(conv_layer(p, name + ".branch1", avg_pool(x, 1, 1), dilation), x.h, x.w);
  Grid b3 = bilinear(conv_layer(p, name + ".branch3", avg_pool(x, 3, 3), dilation), x.h, x.w);
  Grid b6 = bilinear(conv_layer(p, name + ".branch6", avg_pool(x, 6, 6), dilation), x.h, x.w);
  return add(add(add(b1, b3), b6), x);
}

SAResult sa(Params& p, const std::string& name, const Grid& x, bool train) {
  SAResult r;
  r.residual = conv_block(p, name + ".main", x, train);
  const Grid padded = pad(x, x.h % 2, x.w % 2);
  const Grid squeezed = conv_block(p, name + ".attn", avg_pool(padded, padded.h / 2, padded.w / 2), train);
  r.attention = bilinear(sigmoid(squeezed), x.h, x.w);
  r.output = add(mul(r.attention, r.residual), r.attention);
  return r;
}

EBlockResult eblock(Params& p, const std::string& name, const Grid& x, int level, bool train) {
  const Grid y = conv_bn_relu(p, name + ".entry", x, train);
  EBlockResult r;
  r.ddpp_tap = p.has(name + ".ddpp.branch1.weight") ? ddpp(p, name + ".ddpp", y, level) : y;
  r.sa_tap = p.has(name + ".sa.main.0.conv.weight") ? sa(p, name + ".sa", y, train).output : y;
  r.out = add(r.ddpp_tap, r.sa_tap);
  return r;
}

Grid dblock(Params& p, const std::string& name, const Grid& x, const Grid& skip, bool train) {
  const Grid merged = concat(bilinear(x, skip.h, skip.w), skip);
  if (p.has(name + ".sa.main.0.conv.weight")) return sa(p, name + ".sa", merged, train).output;
  return conv_block(p, name + ".block", merged, train);
}

Grid aggregate(Params& p, const std::string& name, const std::vector<Grid>& taps, int64_t h, int64_t w) {
  Grid total;
  for (size_t i = 0; i < taps.size(); ++i) {
    Grid proj = conv_layer(p, name + ".proj" + std::to_string(i), taps[i]);
    if (proj.h != h || proj.w != w) proj = bilinear(proj, h, w);
    total = i == 0 ? proj : add(total, proj);
  }
  return total;
}

Grid network(Params& p, const Grid& x, bool train) {
  const int64_t ph = std::max<int64_t>(48, round_up(x.h, 16));
  const int64_t pw = std::max<int64_t>(48, round_up(x.w, 16));
  Grid cur = pad(x, ph - x.h, pw - x.w);
  std::vector<EBlockResult> enc;
  for (int level = 1; level <= 4; ++level) {
    enc.push_back(eblock(p, "enc" + std::to_string(level), cur, level, train));
    cur = max_pool(enc.back().out);
  }
  cur = conv_block(p, "bottleneck", cur, train);
  std::vector<Grid> dec_taps;
  for (int level = 4; level >= 1; --level) {
    cur = dblock(p, "dec" + std::to_string(level), cur, enc[static_cast<size_t>(level - 1)].out, train);
    dec_taps.push_back(cur);
  }
  std::vector<Grid> enc_taps;
  for (const EBlockResult& e : enc) {
    enc_taps.push_back(e.ddpp_tap);
    enc_taps.push_back(e.sa_tap);
  }
  const Grid enc_agg = aggregate(p, "enc_agg", enc_taps, ph, pw);
  const Grid dec_agg = aggregate(p, "dec_agg", dec_taps, ph, pw);
  const Grid fused = add(conv_layer(p, "dec_proj", cur), conv_layer(p, "fusion", add(enc_agg, dec_agg)));
  return crop(sigmoid(conv_layer(p, "head", fused)), x.h, x.w);
}

int64_t conv_block_params(int64_t in, int64_t out) {
  // Two 3x3 convs with bias, each followed by BN (gamma, beta).
  return (9 * in * out + out + 2 * out) + (9 * out * out + out + 2 * out);
}

int64_t param_count(const NetworkConfig& c) {
  auto conv = [](int64_t in, int64_t out, int64_t k) { return k * k * in * out + out; };
  auto conv_bn = [&](int64_t in, int64_t out) { return conv(in, out, 3) + 2 * out; };
  int64_t total = 0;
  int64_t in = c.input_channels;
  for (int64_t ch : c.encoder_channels) {
    total += conv_bn(in, ch);
    if (c.enable_ddpp) total += 3 * conv(ch, ch, 3);
    if (c.enable_sa) total += 2 * conv_block_params(ch, ch);
    in = ch;
  }
  total += conv_block_params(in, c.bottleneck_channels);
  int64_t below = c.bottleneck_channels;
  for (auto it = c.encoder_channels.rbegin(); it != c.encoder_channels.rend(); ++it) {
    const int64_t merged = below + *it;
    total += c.enable_sa ? 2 * conv_block_params(merged, *it) : conv_block_params(merged, *it);
    below = *it;
  }
  const int64_t a = c.aggregation_channels;
  for (int64_t ch : c.encoder_channels) total += 2 * conv(ch, a, 1) + conv(ch, a, 1);
  total += conv(a, a, 3) + conv(c.encoder_channels.front(), a, 1) + conv(a, 1, 1);
  return total;
}

Counts recount(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, const std::vector<uint8_t>& fov) {
  Counts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!fov.empty() && fov[i] == 0) continue;
    if (pred[i] && gt[i]) ++c.tp;
    if (pred[i] && !gt[i]) ++c.fp;
    if (!pred[i] && !gt[i]) ++c.tn;
    if (!pred[i] && gt[i]) ++c.fn;
  }
  return c;
}

std::optional<double> pair_auroc(const std::vector<float>& scores, const std::vector<uint8_t>& gt) {
  double wins = 0.0;
  uint64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!gt[i]) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (gt[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  if (pairs == 0) return std::nullopt;
  return wins / static_cast<double>(pairs);
}

double ei_energy(const Grid& p, const Grid& g, double alpha, double beta, double eps) {
  const double pi = std::numbers::pi;
  double total = 0.0;
  for (int64_t i = 0; i < p.n; ++i)
    for (int64_t ch = 0; ch < p.c; ++ch) {
      std::vector<double> d(static_cast<size_t>(p.h * p.w));
      for (int64_t y = 0; y < p.h; ++y)
        for (int64_t x = 0; x < p.w; ++x) {
          const double t = std::clamp((2.0 * p.at(i, ch, y, x) - 1.0) / beta, -1.0, 1.0);
          d[static_cast<size_t>(y * p.w + x)] = alpha * 0.5 * (t + 1.0) - g.at(i, ch, y, x);
        }
      for (int64_t u = 0; u < p.h; ++u)
        for (int64_t v = 0; v < p.w; ++v) {
          if (u == 0 && v == 0) continue;
          std::complex<double> acc = 0.0;
          for (int64_t y = 0; y < p.h; ++y)
            for (int64_t x = 0; x < p.w; ++x) {
              const double phase = -2.0 * pi *
                                   (static_cast<double>(u * y) / static_cast<double>(p.h) +
                                    static_cast<double>(v * x) / static_cast<double>(p.w));
              acc += d[static_cast<size_t>(y * p.w + x)] * std::polar(1.0, phase);
            }
          acc /= std::sqrt(static_cast<double>(p.h * p.w));
          // Signed frequency: indices past the half wrap to negative.
          const double ky = static_cast<double>(u <= p.h / 2 ? u : u - p.h);
          const double kx = static_cast<double>(v <= p.w / 2 ? v : v - p.w);
          total += std::norm(acc) / (2.0 * (std::hypot(ky, kx) + eps));
        }
    }
  return total / static_cast<double>(p.n);
}

double dice(const std::vector<double>& p, const std::vector<double>& g) {
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    sp += p[i];
    sg += g[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0);
}

double bce(const std::vector<double>& p, const std::vector<double>& g) {
  double total = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double q = std::min(std::max(p[i], 1e-7), 1.0 - 1e-7);
    total -= g[i] * std::log(q) + (1.0 - g[i]) * std::log(1.0 - q);
  }
  return total / static_cast<double>(p.size());
}

double adam_quadratic(double w0, double target, double lr, int steps, double beta1, double beta2, double eps) {
  double w = w0, m = 0.0, v = 0.0;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2.0 * (w - target);
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, t));
    const double vhat = v / (1.0 - std::pow(beta2, t));
    w -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  return w;
}

}  // namespace mslae::reference
