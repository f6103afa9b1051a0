#include <doctest.h>

#include <cmath>
#include <fstream>

#include "mslae/checkpoint.hpp"
#include "mslae/data.hpp"
#include "mslae/error.hpp"
#include "mslae/network.hpp"
#include "reference/reference.hpp"
#include "unit/helpers.hpp"

using namespace mslae;
using testutil::uniform;

namespace {

NetworkConfig tiny() {
  NetworkConfig c;
  c.encoder_channels = {2, 4, 8, 16};
  c.bottleneck_channels = 32;
  return c;
}

NetworkConfig reduced() {
  NetworkConfig c;
  c.encoder_channels = {4, 8, 16, 32};
  c.bottleneck_channels = 64;
  return c;
}

NetworkConfig ablated(NetworkConfig c, bool ddpp, bool sa) {
  c.enable_ddpp = ddpp;
  c.enable_sa = sa;
  return c;
}

// Regression constants produced by tests/oracles/param_count.py, which counts
// from the layer list alone.
constexpr int64_t kFullParams = 15615233;
constexpr int64_t kSaOnlyParams = 13284497;
constexpr int64_t kDdppOnlyParams = 9390689;
constexpr int64_t kReducedParams = 252725;
constexpr int64_t kTinyParams = 66399;

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(param_count(build_state(NetworkConfig{})) == kFullParams);
  CHECK(param_count(build_state(ablated(NetworkConfig{}, false, true))) == kSaOnlyParams);
  CHECK(param_count(build_state(ablated(NetworkConfig{}, true, false))) == kDdppOnlyParams);
  CHECK(param_count(build_state(reduced())) == kReducedParams);
  CHECK(param_count(build_state(tiny())) == kTinyParams);
  for (const NetworkConfig& c : {NetworkConfig{}, ablated(NetworkConfig{}, false, true), reduced(), tiny()})
    CHECK(param_count(build_state(c)) == reference::param_count(c));
  CHECK(kSaOnlyParams < kFullParams);
  CHECK(kDdppOnlyParams < kFullParams);

  ParameterSet ps;
  ps.conv("c", ConvSpec::same(16, 64, 3));
  CHECK(ps.count() == 9280);
}

TEST_CASE("breakdown sums to the total") {
  ModelState st = build_state(reduced());
  ParamBreakdown b = param_breakdown(st);
  int64_t sum = 0;
  for (const auto& [name, n] : b.modules) {
    CHECK(n > 0);
    sum += n;
  }
  CHECK(sum == b.total);
}

TEST_CASE("network configuration is validated") {
  NetworkConfig c;
  c.encoder_channels = {16, 64, 128};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(build_state(ablated(NetworkConfig{}, false, false)), ConfigError);
  CHECK(NetworkConfig{}.decoder_channels() == std::vector<int64_t>{256, 128, 64, 16});
}

TEST_CASE("forward shape, range and purity") {
  ModelState st = init_he_normal(tiny(), 3);
  Network net(st);
  Tensor x = uniform({2, 3, 64, 64}, 4);
  Tensor y = net.forward(x, Mode::train);
  CHECK(y.shape() == Shape{2, 1, 64, 64});
  for (float v : y.data()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  Tensor a = net.forward(x, Mode::eval);
  Tensor b = net.forward(x, Mode::eval);
  CHECK(testutil::same_bits(a, b));
}

TEST_CASE("odd input sizes are padded and cropped back") {
  ModelState st = init_he_normal(tiny(), 5);
  Network net(st);
  CHECK(Network::padded_size({584, 565}) == Hw{592, 576});
  CHECK(Network::padded_size({16, 16}) == Hw{48, 48});
  Tensor y = net.forward(uniform({1, 3, 37, 29}, 6), Mode::train);
  CHECK(y.shape() == Shape{1, 1, 37, 29});
  CHECK_THROWS_AS(net.forward(uniform({1, 3, 40, 48}, 7), Mode::train, false), ConfigError);
  CHECK_THROWS_AS(net.forward(uniform({1, 1, 48, 48}, 7), Mode::train), ConfigError);
}

TEST_CASE("network matches the straight-line oracle") {
  ModelState st = init_he_normal(tiny(), 8);
  testutil::randomize(st.params, 9);
  Network net(st);
  Tensor x = uniform({1, 3, 50, 45}, 10);
  reference::Params p(st.params);
  auto ref = reference::network(p, reference::from_tensor(x), true);
  Tensor y = net.forward(x, Mode::train);
  for (size_t i = 0; i < ref.v.size(); ++i) REQUIRE(y.data()[i] == ref.v[i]);
}

TEST_CASE("aggregators") {
  ModelState st = init_he_normal(tiny(), 11);
  Network net(st);
  const Hw target{16, 16};
  const auto& ch = st.config.encoder_channels;

  std::vector<EBlockOutput> enc;
  std::vector<DBlockOutput> dec;
  for (int level = 0; level < kLevels; ++level) {
    int64_t s = 16 >> level;
    Tensor z = Tensor::zeros({1, ch[static_cast<size_t>(level)], s, s});
    enc.push_back({z, z, z});
    Tensor zd = Tensor::zeros({1, ch[static_cast<size_t>(kLevels - 1 - level)], 2 << level, 2 << level});
    dec.push_back({zd, zd});
  }
  Tensor ae = net.aggregate_encoder(enc, target);
  Tensor ad = net.aggregate_decoder(dec, target);
  CHECK(ae.shape() == Shape{1, 16, 16, 16});
  CHECK(ad.shape() == Shape{1, 16, 16, 16});
  for (float v : ae.data()) CHECK(v == 0.0f);
  for (float v : ad.data()) CHECK(v == 0.0f);

  // One nonzero level-1 tap: the aggregate is that tap's projection alone.
  enc[0].ddpp_tap = uniform({1, ch[0], 16, 16}, 12);
  Tensor single = net.aggregate_encoder(enc, target);
  Tensor proj = net.encoder_aggregator().projections()[0].forward(enc[0].ddpp_tap);
  for (size_t i = 0; i < proj.data().size(); ++i) CHECK(single.data()[i] == doctest::Approx(proj.data()[i]));

  enc.pop_back();
  CHECK_THROWS_AS(net.aggregate_encoder(enc, target), ConfigError);
}

TEST_CASE("He-normal initialization") {
  ModelState a = init_he_normal(NetworkConfig{}, 42);
  ModelState b = init_he_normal(NetworkConfig{}, 42);
  for (size_t i = 0; i < a.params.entries().size(); ++i)
    REQUIRE(testutil::same_bits(a.params.entries()[i].value, b.params.entries()[i].value));

  const auto* w = a.params.find("enc2.entry.conv.weight");
  REQUIRE(w != nullptr);
  CHECK(w->value.shape() == Shape{64, 16, 3, 3});
  double s = 0, s2 = 0;
  for (float v : w->value.data()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(w->value.numel());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::abs(sd - std::sqrt(2.0 / 144.0)) < 0.1 * std::sqrt(2.0 / 144.0));

  for (const auto& e : a.params.entries()) {
    if (e.kind == ParamKind::conv_bias || e.kind == ParamKind::bn_beta)
      for (float v : e.value.data()) REQUIRE(v == 0.0f);
    if (e.kind == ParamKind::bn_gamma)
      for (float v : e.value.data()) REQUIRE(v == 1.0f);
  }
}

TEST_CASE("zeroed aggregation leaves the decoder path through the head") {
  ModelState st = init_he_normal(tiny(), 13);
  for (const auto& e : st.params.entries()) {
    if (e.name.rfind("enc_agg.", 0) == 0 || e.name.rfind("dec_agg.", 0) == 0) {
      Tensor t = e.value;
      for (float& v : t.mutable_data()) v = 0.0f;
    }
  }
  Network net(st);
  Tensor x = uniform({1, 3, 48, 48}, 14);
  ForwardTrace t = net.trace(x, Mode::train);
  Tensor direct = sigmoid(net.head().forward(net.decoder_projection().forward(t.decoder.back().out)));
  CHECK(testutil::same_bits(t.probabilities, direct));
}

TEST_CASE("horizontal flip equivariance with mirror-symmetric kernels") {
  ModelState st = init_he_normal(tiny(), 15);
  for (const auto& e : st.params.entries()) {
    if (e.kind != ParamKind::conv_weight || e.value.shape().w != 3) continue;
    Tensor t = e.value;
    const Shape& s = t.shape();
    for (int64_t o = 0; o < s.n; ++o)
      for (int64_t i = 0; i < s.c; ++i)
        for (int64_t r = 0; r < 3; ++r)
          t.mutable_data()[static_cast<size_t>(t.index(o, i, r, 2))] = t.at(o, i, r, 0);
  }
  Network net(st);
  Tensor x = uniform({1, 3, 48, 48}, 16);
  Tensor a = hflip(net.forward(x, Mode::train));
  Tensor b = net.forward(hflip(x), Mode::train);
  double worst = 0;
  for (size_t i = 0; i < a.data().size(); ++i)
    worst = std::max(worst, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
  CHECK(worst <= 1e-4);

  // General kernels break the symmetry.
  ModelState g = init_he_normal(tiny(), 17);
  Network gn(g);
  Tensor c = hflip(gn.forward(x, Mode::train));
  Tensor d = gn.forward(hflip(x), Mode::train);
  double diff = 0;
  for (size_t i = 0; i < c.data().size(); ++i)
    diff = std::max(diff, static_cast<double>(std::abs(c.data()[i] - d.data()[i])));
  CHECK(diff > 1e-3);
}

TEST_CASE("describe reports dilations and channels per level") {
  ModelState st = build_state(NetworkConfig{});
  auto rows = describe(st, {584, 565});
  std::vector<int64_t> enc_channels, dilations;
  for (const LevelSummary& r : rows) {
    if (r.stage == "encoder") {
      enc_channels.push_back(r.channels);
      dilations.push_back(r.dilation);
      CHECK(r.receptive_field == 2 * r.dilation + 1);
    }
    if (r.stage == "bottleneck") CHECK(r.channels == 512);
  }
  CHECK(enc_channels == std::vector<int64_t>{16, 64, 128, 256});
  CHECK(dilations == std::vector<int64_t>{1, 2, 3, 4});
}

TEST_CASE("checkpoint round trip is bitwise") {
  testutil::TempDir dir("ckpt");
  ModelState st = init_he_normal(tiny(), 18);
  Network net(st);
  Tensor x = uniform({2, 3, 48, 48}, 19);
  net.forward(x, Mode::train);  // populates running statistics
  Tensor before = net.forward(x, Mode::eval);
  save_checkpoint(st, dir / "m.ckpt");
  ModelState loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.config == st.config);
  CHECK(loaded.seed == 18);
  Network ln(loaded);
  CHECK(testutil::same_bits(ln.forward(x, Mode::eval), before));
}

TEST_CASE("checkpoint errors") {
  testutil::TempDir dir("ckpt-err");
  ModelState st = init_he_normal(tiny(), 20);
  const auto path = dir / "m.ckpt";
  save_checkpoint(st, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& data) {
    std::ofstream out(dir / name, std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    return dir / name;
  };
  auto kind_of = [](const std::filesystem::path& p, const NetworkConfig* expected = nullptr) {
    try {
      if (expected)
        load_checkpoint(p, *expected);
      else
        load_checkpoint(p);
    } catch (const CheckpointError& e) {
      return std::optional<CheckpointErrorKind>(e.kind());
    }
    return std::optional<CheckpointErrorKind>();
  };

  CHECK(kind_of(write("trunc.ckpt", bytes.substr(0, bytes.size() - 100))) == CheckpointErrorKind::truncated);
  CHECK(kind_of(write("short.ckpt", bytes.substr(0, 20))) == CheckpointErrorKind::truncated);
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  CHECK(kind_of(write("ver.ckpt", wrong_version)) == CheckpointErrorKind::version_mismatch);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(kind_of(write("magic.ckpt", bad_magic)) == CheckpointErrorKind::malformed);

  std::string renamed = bytes;
  const size_t at = renamed.rfind("head.bias");
  REQUIRE(at != std::string::npos);
  renamed.replace(at, 9, "head.bixs");
  CHECK(kind_of(write("name.ckpt", renamed)) == CheckpointErrorKind::unknown_tensor);

  ModelState ablated_state = init_he_normal(ablated(tiny(), false, true), 21);
  const auto abl = dir / "abl.ckpt";
  save_checkpoint(ablated_state, abl);
  NetworkConfig full = tiny();
  CHECK(kind_of(abl, &full) == CheckpointErrorKind::shape_mismatch);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
}
