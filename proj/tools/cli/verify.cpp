#include "cli/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "mslae/data.hpp"
#include "mslae/gradcheck.hpp"
#include "mslae/losses.hpp"
#include "mslae/metrics.hpp"
#include "mslae/network.hpp"
#include "reference/reference.hpp"

namespace mslae::cli {

namespace ref = mslae::reference;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor uniform(const Shape& s, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(static_cast<size_t>(s.numel()));
  for (float& x : v) x = u(rng);
  return Tensor::from_data(s, std::move(v));
}

Tensor bernoulli(const Shape& s, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution b(p);
  std::vector<float> v(static_cast<size_t>(s.numel()));
  for (float& x : v) x = b(rng) ? 1.0f : 0.0f;
  return Tensor::from_data(s, std::move(v));
}

// Non-trivial values everywhere, including biases and BN affine terms.
void randomize(ParameterSet& ps, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (const auto& e : ps.entries()) {
    Tensor t = e.value;
    for (float& v : t.mutable_data()) v = e.kind == ParamKind::bn_gamma ? 1.0f + 0.2f * n(rng) : n(rng);
  }
}

std::vector<Tensor> with_params(std::vector<Tensor> v, const ParameterSet& ps, const std::string& prefix = "") {
  for (const auto& e : ps.entries())
    if (e.name.rfind(prefix, 0) == 0) v.push_back(e.value);
  return v;
}

// Bitwise comparison; counts differing elements (a shape mismatch counts all).
size_t mismatches(const Tensor& t, const ref::Grid& g) {
  const Shape& s = t.shape();
  if (s.n != g.n || s.c != g.c || s.h != g.h || s.w != g.w) return std::max<size_t>(g.v.size(), 1);
  auto d = t.data();
  size_t n = 0;
  for (size_t i = 0; i < g.v.size(); ++i)
    if (std::memcmp(&d[i], &g.v[i], sizeof(float)) != 0) ++n;
  return n;
}

size_t value_mismatches(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return std::max<size_t>(a.size(), 1);
  size_t n = 0;
  for (size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) ++n;
  return n;
}

std::string join_seeds(const std::vector<uint64_t>& seeds) {
  std::string s;
  for (uint64_t v : seeds) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

struct GradCase {
  std::string name;
  // Builds the graph and inputs for one seed and runs the check.
  std::function<GradcheckReport(std::mt19937_64& rng, GradcheckOptions o)> run;
  double step = 1e-3;
  int64_t entries = 0;
};

CheckResult run_grad_case(const GradCase& c, const SuiteOptions& options) {
  CheckResult r;
  r.name = "gradcheck " + c.name;
  const auto t0 = Clock::now();
  int64_t elements = 0, failures = 0;
  double max_abs = 0.0;
  r.passed = true;
  try {
    for (uint64_t seed : options.seeds) {
      std::mt19937_64 rng(seed * 7919 + 17);
      GradcheckOptions o;
      o.step = c.step;
      o.seed = seed;
      o.max_entries_per_input = c.entries;
      testing::ScopedGradFault fault(options.fault);
      const GradcheckReport rep = c.run(rng, o);
      for (const auto& in : rep.inputs) {
        elements += in.entries_checked;
        failures += in.failures;
        max_abs = std::max(max_abs, in.max_abs_error);
      }
      r.passed = r.passed && rep.passed;
    }
    std::ostringstream os;
    os << "seeds " << join_seeds(options.seeds) << ", " << elements << " jacobian entries, " << failures
       << " outside tolerance, max |a-n| " << std::setprecision(3) << max_abs;
    if (c.step != 1e-3) os << ", step " << c.step;
    r.detail = os.str();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = e.what();
  }
  r.seconds = seconds_since(t0);
  return r;
}

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.encoder_channels = {2, 4, 8, 16};
  c.bottleneck_channels = 32;
  c.aggregation_channels = 4;
  return c;
}

NetworkConfig reduced_config() {
  NetworkConfig c;
  c.encoder_channels = {4, 8, 16, 32};
  c.bottleneck_channels = 64;
  return c;
}

template <typename F>
CheckResult timed(const std::string& name, F&& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = Clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = seconds_since(t0);
  return r;
}

std::string mismatch_detail(size_t cases, size_t bad, const char* what = "cases") {
  return std::to_string(cases) + " " + what + ", " + std::to_string(bad) + " mismatched values";
}

}  // namespace

std::vector<CheckResult> gradient_checks(const SuiteOptions& options) {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, auto fn, double step = 1e-3, int64_t entries = 0) {
    cases.push_back({std::move(name), fn, step, entries});
  };

  add_case("conv2d 3x3 dilation 2", [](std::mt19937_64& g, GradcheckOptions o) {
    const ConvSpec cs = ConvSpec::same(2, 3, 3, 2);
    return gradcheck([cs](const std::vector<Tensor>& in) { return conv2d(in[0], cs, in[1], in[2]); },
                     {uniform({2, 2, 7, 6}, g), uniform({3, 2, 3, 3}, g), uniform({3, 1, 1, 1}, g)}, o);
  });
  add_case("conv2d 1x1", [](std::mt19937_64& g, GradcheckOptions o) {
    const ConvSpec cs = ConvSpec::same(3, 2, 1);
    return gradcheck([cs](const std::vector<Tensor>& in) { return conv2d(in[0], cs, in[1], in[2]); },
                     {uniform({1, 3, 5, 5}, g), uniform({2, 3, 1, 1}, g), uniform({2, 1, 1, 1}, g)}, o);
  });
  add_case("adaptive_avg_pool2d 7x8 to 3x3", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return adaptive_avg_pool2d(in[0], {3, 3}); },
                     {uniform({1, 2, 7, 8}, g)}, o);
  });
  add_case("upsample_bilinear 3x4 to 7x9", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return upsample_bilinear(in[0], {7, 9}); },
                     {uniform({1, 2, 3, 4}, g)}, o);
  });
  add_case("batchnorm2d train", [](std::mt19937_64& g, GradcheckOptions o) {
    RunningStats st = RunningStats::unrecorded(3);
    return gradcheck(
        [&st](const std::vector<Tensor>& in) { return batchnorm2d(in[0], in[1], in[2], st, Mode::train); },
        {uniform({2, 3, 4, 4}, g), uniform({3, 1, 1, 1}, g), uniform({3, 1, 1, 1}, g)}, o);
  });
  add_case("batchnorm2d eval", [](std::mt19937_64& g, GradcheckOptions o) {
    RunningStats st = RunningStats::unrecorded(3);
    Tensor x = uniform({2, 3, 4, 4}, g), gamma = uniform({3, 1, 1, 1}, g), beta = uniform({3, 1, 1, 1}, g);
    {
      NoGradGuard ng;
      batchnorm2d(uniform({2, 3, 4, 4}, g), gamma, beta, st, Mode::train);
    }
    return gradcheck(
        [&st](const std::vector<Tensor>& in) { return batchnorm2d(in[0], in[1], in[2], st, Mode::eval); },
        {x, gamma, beta}, o);
  });
  add_case("relu", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return relu(in[0]); }, {uniform({1, 2, 4, 4}, g)}, o);
  });
  add_case("sigmoid", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return sigmoid(in[0]); },
                     {uniform({1, 2, 4, 4}, g, -3.0f, 3.0f)}, o);
  });
  add_case("maxpool2d", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return maxpool2d(in[0]); }, {uniform({1, 2, 4, 6}, g)}, o);
  });
  add_case("add / mul", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return add(mul(in[0], in[1]), in[0]); },
                     {uniform({1, 2, 4, 4}, g), uniform({1, 2, 4, 4}, g)}, o);
  });
  add_case("concat_channels", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return concat_channels(in[0], in[1]); },
                     {uniform({2, 2, 4, 4}, g), uniform({2, 1, 4, 4}, g)}, o);
  });
  add_case("pad_zero / crop", [](std::mt19937_64& g, GradcheckOptions o) {
    return gradcheck([](const std::vector<Tensor>& in) { return crop(pad_zero(in[0], 1, 2), {3, 5}); },
                     {uniform({1, 2, 4, 4}, g)}, o);
  });
  add_case("ConvBnRelu", [](std::mt19937_64& g, GradcheckOptions o) {
    ParameterSet ps;
    ConvBnRelu m(ps, "cbr", 3, 4);
    randomize(ps, g);
    return gradcheck([&m](const std::vector<Tensor>& in) { return m.forward(in[0], Mode::train); },
                     with_params({uniform({1, 3, 8, 8}, g)}, ps), o);
  });
  add_case("ConvBlock", [](std::mt19937_64& g, GradcheckOptions o) {
    ParameterSet ps;
    ConvBlock m(ps, "cb", 4, 4);
    randomize(ps, g);
    return gradcheck([&m](const std::vector<Tensor>& in) { return m.forward(in[0], Mode::train); },
                     with_params({uniform({1, 4, 8, 8}, g)}, ps), o);
  });
  for (int level : {1, 4}) {
    add_case("D-DPP level " + std::to_string(level), [level](std::mt19937_64& g, GradcheckOptions o) {
      ParameterSet ps;
      DDPPModule m(ps, "ddpp", DDPPConfig::for_level(4, level));
      randomize(ps, g);
      return gradcheck([&m](const std::vector<Tensor>& in) { return m.forward(in[0]); },
                       with_params({uniform({1, 4, 8, 8}, g)}, ps), o);
    });
  }
  add_case("SA", [](std::mt19937_64& g, GradcheckOptions o) {
    ParameterSet ps;
    SAModule m(ps, "sa", SAConfig{4, 4, {2, 2}});
    randomize(ps, g);
    return gradcheck([&m](const std::vector<Tensor>& in) { return m.forward(in[0], Mode::train); },
                     with_params({uniform({1, 4, 8, 8}, g)}, ps), o);
  });
  add_case("E-Block level 3", [](std::mt19937_64& g, GradcheckOptions o) {
    ParameterSet ps;
    EBlock m(ps, "enc", EBlockConfig{4, 4, 3, true, true});
    randomize(ps, g);
    return gradcheck([&m](const std::vector<Tensor>& in) { return m.forward(in[0], Mode::train).out; },
                     with_params({uniform({1, 4, 8, 8}, g)}, ps), o);
  });
  add_case("D-Block", [](std::mt19937_64& g, GradcheckOptions o) {
    ParameterSet ps;
    DBlock m(ps, "dec", DBlockConfig{4, 4, 4, true, true});
    randomize(ps, g);
    return gradcheck([&m](const std::vector<Tensor>& in) { return m.forward(in[0], in[1], Mode::train).out; },
                     with_params({uniform({1, 4, 4, 4}, g), uniform({1, 4, 8, 8}, g)}, ps), o);
  });
  add_case("encoder aggregation", [](std::mt19937_64& g, GradcheckOptions o) {
    ModelState st = build_state(tiny_config());
    randomize(st.params, g);
    Network net(st);
    std::vector<Tensor> in;
    const auto& ch = st.config.encoder_channels;
    for (int level = 0; level < kLevels; ++level) {
      const int64_t s = 16 >> level;
      in.push_back(uniform({1, ch[static_cast<size_t>(level)], s, s}, g));
      in.push_back(uniform({1, ch[static_cast<size_t>(level)], s, s}, g));
    }
    in = with_params(in, st.params, "enc_agg.");
    return gradcheck(
        [&net](const std::vector<Tensor>& t) {
          std::vector<EBlockOutput> taps(kLevels);
          for (size_t i = 0; i < taps.size(); ++i) {
            taps[i].ddpp_tap = t[2 * i];
            taps[i].sa_tap = t[2 * i + 1];
          }
          return net.aggregate_encoder(taps, {16, 16});
        },
        in, o);
  });
  add_case("decoder aggregation", [](std::mt19937_64& g, GradcheckOptions o) {
    ModelState st = build_state(tiny_config());
    randomize(st.params, g);
    Network net(st);
    std::vector<Tensor> in;
    const auto ch = st.config.decoder_channels();
    for (int i = 0; i < kLevels; ++i) {
      const int64_t s = 2 << i;
      in.push_back(uniform({1, ch[static_cast<size_t>(i)], s, s}, g));
    }
    in = with_params(in, st.params, "dec_agg.");
    return gradcheck(
        [&net](const std::vector<Tensor>& t) {
          std::vector<DBlockOutput> taps(kLevels);
          for (size_t i = 0; i < taps.size(); ++i) taps[i].sa_tap = t[i];
          return net.aggregate_decoder(taps, {16, 16});
        },
        in, o);
  });
  if (!options.skip_end_to_end) {
    // Activations reach tens here; a 1e-3 step leaves the float32 quotient
    // dominated by rounding, 3e-3 does not.
    add_case(
        "reduced network end to end 1x3x16x16",
        [](std::mt19937_64& g, GradcheckOptions o) {
          ModelState st = init_he_normal(reduced_config(), o.seed);
          Network net(st);
          return gradcheck([&net](const std::vector<Tensor>& in) { return net.forward(in[0], Mode::train); },
                           with_params({uniform({1, 3, 16, 16}, g)}, st.params), o);
        },
        3e-3, 3);
  }

  std::vector<CheckResult> out;
  for (const GradCase& c : cases) out.push_back(run_grad_case(c, options));
  return out;
}

std::vector<CheckResult> loss_gradient_checks(const SuiteOptions& options) {
  std::vector<GradCase> cases;
  auto probs = [](std::mt19937_64& g) { return uniform({1, 1, 8, 8}, g, 0.02f, 0.98f); };
  cases.push_back({"BCE 8x8", [probs](std::mt19937_64& g, GradcheckOptions o) {
                     Tensor target = bernoulli({1, 1, 8, 8}, g);
                     return gradcheck([target](const std::vector<Tensor>& in) { return bce_loss(in[0], target); },
                                      {probs(g)}, o);
                   }});
  cases.push_back({"Dice 8x8", [probs](std::mt19937_64& g, GradcheckOptions o) {
                     Tensor target = bernoulli({1, 1, 8, 8}, g);
                     return gradcheck([target](const std::vector<Tensor>& in) { return dice_loss(in[0], target); },
                                      {probs(g)}, o);
                   }});
  cases.push_back({"EI 8x8", [probs](std::mt19937_64& g, GradcheckOptions o) {
                     Tensor target = bernoulli({1, 1, 8, 8}, g);
                     const LossConfig cfg;
                     return gradcheck(
                         [target, cfg](const std::vector<Tensor>& in) { return ei_loss(in[0], target, cfg); },
                         {probs(g)}, o);
                   }});
  cases.push_back({"smoothed Heaviside", [](std::mt19937_64& g, GradcheckOptions o) {
                     return gradcheck([](const std::vector<Tensor>& in) { return smoothed_heaviside(in[0], 0.25f); },
                                      {uniform({1, 1, 4, 4}, g, -0.5f, 0.5f)}, o);
                   }});
  std::vector<CheckResult> out;
  for (const GradCase& c : cases) out.push_back(run_grad_case(c, options));
  return out;
}

std::vector<CheckResult> ddpp_oracle_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(timed("D-DPP equals straight-line re-evaluation (bitwise)", [&](CheckResult& r) {
    std::mt19937_64 g(seed);
    size_t bad = 0;
    const int inputs = 10;
    for (int i = 0; i < inputs; ++i) {
      const int level = 1 + i % kLevels;
      const int64_t c = 1 + static_cast<int64_t>(g() % 4);
      const int64_t h = 6 + static_cast<int64_t>(g() % 15), w = 6 + static_cast<int64_t>(g() % 15);
      ParameterSet ps;
      DDPPModule m(ps, "ddpp", DDPPConfig::for_level(c, level));
      randomize(ps, g);
      Tensor x = uniform({1 + static_cast<int64_t>(g() % 2), c, h, w}, g);
      NoGradGuard ng;
      ref::Params p(ps);
      bad += mismatches(m.forward(x), ref::ddpp(p, "ddpp", ref::from_tensor(x), level));
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(inputs, bad, "random inputs");
  }));
  out.push_back(timed("D-DPP with zero parameters is the identity", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 1);
    size_t bad = 0;
    for (int level = 1; level <= kLevels; ++level) {
      ParameterSet ps;
      DDPPModule m(ps, "ddpp", DDPPConfig::for_level(3, level));
      Tensor x = uniform({2, 3, 12, 9}, g);
      NoGradGuard ng;
      const Tensor y = m.forward(x);
      bad += value_mismatches(y.data(), x.data());
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(kLevels, bad, "levels");
  }));
  return out;
}

std::vector<CheckResult> sa_algebra_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(timed("SA output = A*R + A on intercepted maps", [&](CheckResult& r) {
    std::mt19937_64 g(seed);
    size_t bad = 0, values = 0;
    for (Mode mode : {Mode::train, Mode::eval}) {
      ParameterSet ps;
      SAModule m(ps, "sa", SAConfig{3, 5, {2, 2}});
      randomize(ps, g);
      Tensor x = uniform({2, 3, 10, 12}, g);
      NoGradGuard ng;
      if (mode == Mode::eval) m.forward(uniform({2, 3, 10, 12}, g), Mode::train);
      const SAParts parts = m.forward_parts(x, mode);
      auto a = parts.attention.data(), res = parts.residual.data(), o = parts.output.data();
      std::vector<float> expect(a.size());
      for (size_t i = 0; i < a.size(); ++i) expect[i] = a[i] * res[i] + a[i];
      bad += value_mismatches(o, expect);
      values += expect.size();
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(values, bad, "values");
  }));
  out.push_back(timed("SA gate: A=0 gives 0, A=1 gives R+1", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 1);
    NoGradGuard ng;
    const Shape s{2, 4, 6, 6};
    Tensor res = uniform(s, g, -5.0f, 5.0f);
    const Tensor zero = SAModule::combine(Tensor::zeros(s), res);
    const Tensor one = SAModule::combine(Tensor::full(s, 1.0f), res);
    std::vector<float> zeros(static_cast<size_t>(s.numel()), 0.0f), plus_one(zeros.size());
    for (size_t i = 0; i < plus_one.size(); ++i) plus_one[i] = res.data()[i] + 1.0f;
    const size_t bad = value_mismatches(zero.data(), zeros) + value_mismatches(one.data(), plus_one);
    r.passed = bad == 0;
    r.detail = mismatch_detail(2 * zeros.size(), bad, "values");
  }));
  out.push_back(timed("SA equals straight-line re-evaluation (bitwise)", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 2);
    size_t bad = 0;
    for (Mode mode : {Mode::train, Mode::eval}) {
      ParameterSet ps;
      SAModule m(ps, "sa", SAConfig{3, 4, {2, 2}});
      randomize(ps, g);
      Tensor x = uniform({2, 3, 9, 11}, g);
      NoGradGuard ng;
      if (mode == Mode::eval) m.forward(uniform({2, 3, 9, 11}, g), Mode::train);
      ref::Params p(ps);
      const ref::SAResult e = ref::sa(p, "sa", ref::from_tensor(x), mode == Mode::train);
      const SAParts parts = m.forward_parts(x, mode);
      bad += mismatches(parts.output, e.output) + mismatches(parts.attention, e.attention) +
             mismatches(parts.residual, e.residual);
    }
    r.passed = bad == 0;
    r.detail = "train and eval, " + std::to_string(bad) + " mismatched values";
  }));
  return out;
}

std::vector<CheckResult> block_oracle_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(timed("E-Block taps equal re-evaluation (bitwise)", [&](CheckResult& r) {
    std::mt19937_64 g(seed);
    size_t bad = 0, cases = 0;
    for (int level = 1; level <= kLevels; ++level)
      for (auto [dd, sa] : {std::pair{true, true}, {true, false}, {false, true}}) {
        ParameterSet ps;
        EBlock m(ps, "enc", EBlockConfig{3, 4, level, dd, sa});
        randomize(ps, g);
        Tensor x = uniform({2, 3, 8 + level, 10}, g);
        NoGradGuard ng;
        ref::Params p(ps);
        const ref::EBlockResult e = ref::eblock(p, "enc", ref::from_tensor(x), level, true);
        const EBlockOutput o = m.forward(x, Mode::train);
        bad += mismatches(o.out, e.out) + mismatches(o.ddpp_tap, e.ddpp_tap) + mismatches(o.sa_tap, e.sa_tap);
        ++cases;
      }
    r.passed = bad == 0;
    r.detail = mismatch_detail(cases, bad, "level/ablation cases");
  }));
  out.push_back(timed("D-Block equals re-evaluation (bitwise)", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 1);
    size_t bad = 0;
    for (bool sa : {true, false}) {
      ParameterSet ps;
      DBlock m(ps, "dec", DBlockConfig{6, 3, 3, true, sa});
      randomize(ps, g);
      Tensor x = uniform({2, 6, 5, 6}, g), skip = uniform({2, 3, 10, 12}, g);
      NoGradGuard ng;
      ref::Params p(ps);
      bad += mismatches(m.forward(x, skip, Mode::train).out,
                        ref::dblock(p, "dec", ref::from_tensor(x), ref::from_tensor(skip), true));
    }
    r.passed = bad == 0;
    r.detail = "with and without SA, " + std::to_string(bad) + " mismatched values";
  }));
  out.push_back(timed("aggregation paths equal re-evaluation (bitwise)", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 2);
    ModelState st = build_state(tiny_config());
    randomize(st.params, g);
    Network net(st);
    NoGradGuard ng;
    std::vector<EBlockOutput> enc(kLevels);
    std::vector<ref::Grid> enc_grids;
    for (int i = 0; i < kLevels; ++i) {
      const int64_t c = st.config.encoder_channels[static_cast<size_t>(i)], s = 20 >> i;
      enc[static_cast<size_t>(i)].ddpp_tap = uniform({1, c, s, s + 1}, g);
      enc[static_cast<size_t>(i)].sa_tap = uniform({1, c, s, s + 1}, g);
      enc_grids.push_back(ref::from_tensor(enc[static_cast<size_t>(i)].ddpp_tap));
      enc_grids.push_back(ref::from_tensor(enc[static_cast<size_t>(i)].sa_tap));
    }
    std::vector<DBlockOutput> dec(kLevels);
    std::vector<ref::Grid> dec_grids;
    const auto dch = st.config.decoder_channels();
    for (int i = 0; i < kLevels; ++i) {
      const int64_t s = 20 >> (kLevels - 1 - i);
      dec[static_cast<size_t>(i)].sa_tap = uniform({1, dch[static_cast<size_t>(i)], s, s + 1}, g);
      dec_grids.push_back(ref::from_tensor(dec[static_cast<size_t>(i)].sa_tap));
    }
    ref::Params p(st.params);
    const size_t bad = mismatches(net.aggregate_encoder(enc, {20, 21}), ref::aggregate(p, "enc_agg", enc_grids, 20, 21)) +
                       mismatches(net.aggregate_decoder(dec, {20, 21}), ref::aggregate(p, "dec_agg", dec_grids, 20, 21));
    r.passed = bad == 0;
    r.detail = "encoder (8 taps) and decoder (4 taps), " + std::to_string(bad) + " mismatched values";
  }));
  out.push_back(timed("network forward equals re-evaluation (bitwise)", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 3);
    size_t bad = 0, cases = 0;
    for (auto [dd, sa] : {std::pair{true, true}, {true, false}, {false, true}}) {
      NetworkConfig c = tiny_config();
      c.enable_ddpp = dd;
      c.enable_sa = sa;
      ModelState st = build_state(c);
      randomize(st.params, g);
      Network net(st);
      Tensor x = uniform({1, 3, 20, 37}, g);
      NoGradGuard ng;
      for (bool train : {true, false}) {
        ref::Params p(st.params);
        const ref::Grid e = ref::network(p, ref::from_tensor(x), train);
        bad += mismatches(net.forward(x, train ? Mode::train : Mode::eval), e);
        ++cases;
      }
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(cases, bad, "variant/mode cases");
  }));
  out.push_back(timed("parameter counts equal closed-form count", [&](CheckResult& r) {
    std::vector<NetworkConfig> configs{NetworkConfig{}, reduced_config(), tiny_config()};
    NetworkConfig sa_only, ddpp_only;
    sa_only.enable_ddpp = false;
    ddpp_only.enable_sa = false;
    configs.push_back(sa_only);
    configs.push_back(ddpp_only);
    std::ostringstream os;
    r.passed = true;
    for (const NetworkConfig& c : configs) {
      const int64_t lib = param_count(build_state(c)), expect = ref::param_count(c);
      r.passed = r.passed && lib == expect;
      os << (os.tellp() > 0 ? ", " : "") << lib;
      if (lib != expect) os << "!=" << expect;
    }
    r.detail = os.str();
  }));
  return out;
}

std::vector<CheckResult> metric_oracle_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(timed("Se/Sp/Acc equal pixel recount on 100 random pairs", [&](CheckResult& r) {
    std::mt19937_64 g(seed);
    size_t bad = 0;
    for (int i = 0; i < 100; ++i) {
      const size_t n = 1 + g() % 600;
      std::bernoulli_distribution bp(std::uniform_real_distribution<double>(0.05, 0.95)(g));
      std::vector<uint8_t> pred(n), gt(n), fov;
      for (size_t k = 0; k < n; ++k) {
        pred[k] = bp(g);
        gt[k] = bp(g);
      }
      if (i % 2 == 1) {
        fov.resize(n);
        for (auto& f : fov) f = static_cast<uint8_t>(g() % 4 != 0);
      }
      const ConfusionCounts c = confusion(pred, gt, fov);
      const ref::Counts e = ref::recount(pred, gt, fov);
      if (c.tp != e.tp || c.fp != e.fp || c.tn != e.tn || c.fn != e.fn) ++bad;
      auto ratio = [](uint64_t num, uint64_t den) {
        return den == 0 ? std::optional<double>() : std::optional<double>(double(num) / double(den));
      };
      if (sensitivity(c) != ratio(e.tp, e.tp + e.fn)) ++bad;
      if (specificity(c) != ratio(e.tn, e.tn + e.fp)) ++bad;
      if (accuracy(c) != ratio(e.tp + e.tn, e.tp + e.tn + e.fp + e.fn)) ++bad;
    }
    r.passed = bad == 0;
    r.detail = std::to_string(bad) + " disagreements (counts exact, ratios exact)";
  }));
  out.push_back(timed("AUROC equals exhaustive pair count, all inputs up to 8 pixels", [&](CheckResult& r) {
    // Every label pattern of every length 1..8 against every score pattern
    // over three levels (ties included), plus random tie-free scores.
    std::mt19937_64 g(seed + 1);
    const float levels[3] = {0.2f, 0.5f, 0.8f};
    size_t cases = 0, bad = 0;
    double worst = 0.0;
    std::vector<float> scores;
    std::vector<uint8_t> gt;
    auto compare = [&] {
      const auto a = auroc(scores, gt);
      const auto e = ref::pair_auroc(scores, gt);
      ++cases;
      if (a.has_value() != e.has_value()) {
        ++bad;
      } else if (a) {
        const double d = std::abs(*a - *e);
        worst = std::max(worst, d);
        if (d > 1e-12) ++bad;
      }
    };
    for (size_t n = 1; n <= 8; ++n) {
      scores.assign(n, 0.0f);
      gt.assign(n, 0);
      size_t patterns = 1;
      for (size_t k = 0; k < n; ++k) patterns *= 3;
      for (uint32_t labels = 0; labels < (1u << n); ++labels) {
        for (size_t k = 0; k < n; ++k) gt[k] = (labels >> k) & 1u;
        for (size_t code = 0; code < patterns; ++code) {
          size_t c = code;
          for (size_t k = 0; k < n; ++k, c /= 3) scores[k] = levels[c % 3];
          compare();
        }
        for (int rep = 0; rep < 4; ++rep) {
          for (size_t k = 0; k < n; ++k) scores[k] = static_cast<float>(k + 1) / 10.0f;
          std::shuffle(scores.begin(), scores.end(), g);
          compare();
        }
      }
    }
    r.passed = bad == 0;
    std::ostringstream os;
    os << cases << " inputs, " << bad << " disagreements, max |diff| " << std::setprecision(3) << worst;
    r.detail = os.str();
  }));
  out.push_back(timed("AUROC 6-pixel fixture is 8/9", [&](CheckResult& r) {
    const std::vector<float> scores{0.9f, 0.8f, 0.7f, 0.4f, 0.3f, 0.2f};
    const std::vector<uint8_t> gt{1, 1, 0, 1, 0, 0};
    const auto a = auroc(scores, gt);
    r.passed = a && std::abs(*a - 8.0 / 9.0) <= 1e-12;
    std::ostringstream os;
    os << "auroc " << std::setprecision(17) << (a ? *a : -1.0);
    r.detail = os.str();
  }));
  out.push_back(timed("4-pixel fixture gives Se = Sp = Acc = 0.5", [&](CheckResult& r) {
    const std::vector<uint8_t> pred{1, 1, 0, 0}, gt{1, 0, 1, 0};
    const ConfusionCounts c = confusion(pred, gt);
    r.passed = c == ConfusionCounts{1, 1, 1, 1} && sensitivity(c) == 0.5 && specificity(c) == 0.5 && accuracy(c) == 0.5;
    r.detail = "tp=" + std::to_string(c.tp) + " fp=" + std::to_string(c.fp) + " tn=" + std::to_string(c.tn) +
               " fn=" + std::to_string(c.fn);
  }));
  return out;
}

std::vector<CheckResult> loss_value_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(timed("dice(g, g) within smoothing bound", [&](CheckResult& r) {
    std::mt19937_64 g(seed);
    int bad = 0;
    NoGradGuard ng;
    for (int i = 0; i < 20; ++i) {
      Tensor t = bernoulli({1, 1, 8, 8}, g, 0.1 + 0.04 * i);
      double s = 0.0;
      for (float v : t.data()) s += v;
      const double d = dice_loss(t, t).item();
      if (d < 0.0 || d > 1.0 / (2.0 * s + 1.0) + 1e-7) ++bad;
    }
    r.passed = bad == 0;
    r.detail = "20 masks, " + std::to_string(bad) + " above s/(2 sum g + s)";
  }));
  out.push_back(timed("EI equals double-loop spectral oracle on 8x8", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 1);
    NoGradGuard ng;
    double worst = 0.0;
    const LossConfig cfg;
    auto check = [&](const Tensor& p, const Tensor& t) {
      const double lib = ei_loss(p, t, cfg).item();
      const double e = ref::ei_energy(ref::from_tensor(p), ref::from_tensor(t), cfg.alpha, cfg.beta, cfg.ei_epsilon);
      worst = std::max(worst, std::abs(lib - e) / std::max(std::abs(e), 1e-30));
    };
    // Single-pixel disagreement: prediction matches everywhere but one pixel.
    Tensor t = Tensor::zeros({1, 1, 8, 8});
    t.mutable_data()[27] = 1.0f;
    check(Tensor::zeros({1, 1, 8, 8}), t);
    for (int i = 0; i < 10; ++i) check(uniform({1 + i % 2, 1, 8, 8}, g, 0.0f, 1.0f), bernoulli({1 + i % 2, 1, 8, 8}, g));
    r.passed = worst <= 1e-5;
    std::ostringstream os;
    os << "11 fixtures, max relative difference " << std::setprecision(3) << worst;
    r.detail = os.str();
  }));
  out.push_back(timed("EI is zero on the saturated exact match (alpha = 1)", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 2);
    NoGradGuard ng;
    LossConfig cfg;
    cfg.alpha = 1.0f;
    Tensor t = bernoulli({2, 1, 8, 8}, g);
    const float a = ei_loss(t, t, cfg).item();
    const float b = ei_loss(Tensor::zeros({1, 1, 8, 8}), Tensor::zeros({1, 1, 8, 8}), LossConfig{}).item();
    r.passed = a == 0.0f && b == 0.0f;
    r.detail = "match " + std::to_string(a) + ", all-background " + std::to_string(b);
  }));
  out.push_back(timed("BCE and Dice equal closed forms", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 3);
    NoGradGuard ng;
    double worst = 0.0;
    auto check = [&](const std::vector<double>& p, const std::vector<double>& t, int64_t h, int64_t w) {
      std::vector<float> pf(p.begin(), p.end()), tf(t.begin(), t.end());
      Tensor pt = Tensor::from_data({1, 1, h, w}, pf), tt = Tensor::from_data({1, 1, h, w}, tf);
      std::vector<double> pd(pf.begin(), pf.end());
      worst = std::max(worst, std::abs(bce_loss(pt, tt).item() - ref::bce(pd, t)));
      worst = std::max(worst, std::abs(dice_loss(pt, tt).item() - ref::dice(pd, t)));
    };
    check({0.9, 0.1, 0.8, 0.2}, {1, 0, 1, 0}, 2, 2);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (uint32_t labels = 0; labels < 16; ++labels) {
      std::vector<double> p(4), t(4);
      for (int k = 0; k < 4; ++k) {
        p[static_cast<size_t>(k)] = u(g);
        t[static_cast<size_t>(k)] = (labels >> k) & 1u;
      }
      check(p, t, 2, 2);
    }
    r.passed = worst <= 1e-6;
    std::ostringstream os;
    os << "17 2x2 cases, max |diff| " << std::setprecision(3) << worst;
    r.detail = os.str();
  }));
  out.push_back(timed("smoothed Heaviside fixtures", [&](CheckResult& r) {
    NoGradGuard ng;
    Tensor x = Tensor::from_data({1, 1, 1, 5}, {0.0f, 0.125f, 0.25f, -0.25f, 3.0f});
    const Tensor y = smoothed_heaviside(x, 0.25f);
    const std::vector<float> expect{0.5f, 0.75f, 1.0f, 0.0f, 1.0f};
    r.passed = value_mismatches(y.data(), expect) == 0;
    r.detail = "H(0)=0.5, H(beta/2)=0.75, saturation at +-beta";
  }));
  return out;
}

std::vector<CheckResult> augmentation_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  const int draws = 50;
  out.push_back(timed("double flip is the identity", [&](CheckResult& r) {
    std::mt19937_64 g(seed);
    size_t bad = 0;
    for (int i = 0; i < draws; ++i) {
      Tensor x = uniform({1, 1 + static_cast<int64_t>(g() % 3), 1 + static_cast<int64_t>(g() % 20),
                          1 + static_cast<int64_t>(g() % 20)},
                         g);
      bad += value_mismatches(hflip(hflip(x)).data(), x.data()) + value_mismatches(vflip(vflip(x)).data(), x.data());
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(draws, bad, "draws");
  }));
  out.push_back(timed("shift reversal restores all but the zeroed border", [&](CheckResult& r) {
    std::mt19937_64 g(seed + 1);
    AugmentationConfig cfg;
    cfg.seed = seed;
    cfg.shift_frac = 0.3;
    size_t bad = 0;
    for (int i = 0; i < draws; ++i) {
      const int64_t h = 4 + static_cast<int64_t>(g() % 30), w = 4 + static_cast<int64_t>(g() % 30);
      const AugmentDraw d = draw_augmentation(cfg, {h, w}, 0, static_cast<uint64_t>(i));
      Tensor x = uniform({1, 2, h, w}, g, 0.1f, 1.0f);
      const Tensor back = shift(shift(x, d.dy, d.dx), -d.dy, -d.dx);
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xx = 0; xx < w; ++xx) {
            const bool kept = y + d.dy >= 0 && y + d.dy < h && xx + d.dx >= 0 && xx + d.dx < w;
            if (back.at(0, c, y, xx) != (kept ? x.at(0, c, y, xx) : 0.0f)) ++bad;
          }
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(draws, bad, "draws");
  }));
  out.push_back(timed("image, mask and FOV move together", [&](CheckResult& r) {
    // The mask is a pixelwise function of the image, so any misalignment
    // between the two shows up; each map is also checked against a direct
    // source-index computation.
    std::mt19937_64 g(seed + 2);
    AugmentationConfig cfg;
    cfg.seed = seed;
    size_t bad = 0;
    for (int i = 0; i < draws; ++i) {
      const int64_t h = 8 + static_cast<int64_t>(g() % 24), w = 8 + static_cast<int64_t>(g() % 24);
      Sample s;
      s.id = "draw" + std::to_string(i);
      s.image = uniform({1, 3, h, w}, g, 0.05f, 1.0f);
      std::vector<float> m(static_cast<size_t>(h * w)), f(static_cast<size_t>(h * w));
      for (int64_t k = 0; k < h * w; ++k) {
        m[static_cast<size_t>(k)] = s.image.data()[static_cast<size_t>(k)] > 0.5f ? 1.0f : 0.0f;
        f[static_cast<size_t>(k)] = s.image.data()[static_cast<size_t>(2 * h * w + k)] > 0.2f ? 1.0f : 0.0f;
      }
      s.mask = Tensor::from_data({1, 1, h, w}, m);
      s.fov = Tensor::from_data({1, 1, h, w}, f);
      const AugmentDraw d = draw_augmentation(cfg, {h, w}, 3, static_cast<uint64_t>(i));
      const Sample a = augment(s, d);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          int64_t sy = y - d.dy, sx = x - d.dx;
          const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
          if (d.vflip) sy = h - 1 - sy;
          if (d.hflip) sx = w - 1 - sx;
          for (int64_t c = 0; c < 3; ++c)
            if (a.image.at(0, c, y, x) != (inside ? s.image.at(0, c, sy, sx) : 0.0f)) ++bad;
          if (a.mask.at(0, 0, y, x) != (inside ? s.mask.at(0, 0, sy, sx) : 0.0f)) ++bad;
          if (a.fov->at(0, 0, y, x) != (inside ? s.fov->at(0, 0, sy, sx) : 0.0f)) ++bad;
          const float expect_mask = a.image.at(0, 0, y, x) > 0.5f ? 1.0f : 0.0f;
          if (a.mask.at(0, 0, y, x) != expect_mask) ++bad;
        }
      if (!(draw_augmentation(cfg, {h, w}, 3, static_cast<uint64_t>(i)) == d)) ++bad;
    }
    r.passed = bad == 0;
    r.detail = mismatch_detail(draws, bad, "draws");
  }));
  return out;
}

void print_check(std::ostream& out, const CheckResult& r) {
  out << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(58) << r.name << " " << r.detail << " ("
      << std::fixed << std::setprecision(1) << r.seconds << "s)\n"
      << std::defaultfloat;
  out.flush();
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

std::vector<CheckResult> run_verify_suite(const SuiteOptions& options, std::ostream& out) {
  std::vector<CheckResult> all;
  auto section = [&](const char* title, std::vector<CheckResult> rs) {
    out << "== " << title << "\n";
    for (const CheckResult& r : rs) print_check(out, r);
    all.insert(all.end(), rs.begin(), rs.end());
  };
  const uint64_t seed = options.seeds.empty() ? 0 : options.seeds.front();
  section("block oracles", [&] {
    auto rs = ddpp_oracle_checks(seed);
    for (auto& v : {sa_algebra_checks(seed), block_oracle_checks(seed)}) rs.insert(rs.end(), v.begin(), v.end());
    return rs;
  }());
  section("metric oracles", metric_oracle_checks(seed));
  section("losses", loss_value_checks(seed));
  section("augmentation", augmentation_checks(seed));
  section("loss gradients", loss_gradient_checks(options));
  section("gradients", gradient_checks(options));
  return all;
}

}  // namespace mslae::cli
