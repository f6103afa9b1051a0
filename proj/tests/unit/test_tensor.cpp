#include <doctest.h>

#include <cmath>

#include "mslae/error.hpp"
#include "mslae/gradcheck.hpp"
#include "mslae/ops.hpp"
#include "reference/reference.hpp"
#include "unit/helpers.hpp"

using namespace mslae;
using testutil::iota;
using testutil::uniform;

namespace {

Tensor conv_weight(const ConvSpec& spec, float fill) { return Tensor::full(spec.weight_shape(), fill); }

}  // namespace

TEST_CASE("conv with a centred unit kernel is the identity") {
  Tensor x = Tensor::full({1, 1, 5, 5}, 3.0f);
  ConvSpec spec = ConvSpec::same(1, 1, 3);
  Tensor w = Tensor::zeros(spec.weight_shape());
  w.mutable_data()[4] = 1.0f;
  Tensor y = conv2d(x, spec, w, Tensor{});
  CHECK(y.shape() == Shape{1, 1, 5, 5});
  for (float v : y.data()) CHECK(v == 3.0f);
}

TEST_CASE("all-ones kernel sums the neighbourhood") {
  Tensor x = Tensor::full({1, 1, 5, 5}, 1.0f);
  ConvSpec spec = ConvSpec::same(1, 1, 3);
  Tensor y = conv2d(x, spec, conv_weight(spec, 1.0f), Tensor{});
  CHECK(y.at(0, 0, 2, 2) == 9.0f);
  CHECK(y.at(0, 0, 0, 0) == 4.0f);
  CHECK(y.at(0, 0, 0, 2) == 6.0f);
}

TEST_CASE("dilated conv touches only lattice taps") {
  ConvSpec spec = ConvSpec::same(1, 1, 3, 2);
  CHECK(spec.receptive_field() == Hw{5, 5});
  CHECK(spec.padding == Hw{2, 2});
  Tensor w = conv_weight(spec, 1.0f);
  // Impulse response: nonzero exactly at offsets {-2,0,2}^2 from the impulse.
  Tensor x = Tensor::zeros({1, 1, 9, 9});
  x.mutable_data()[static_cast<size_t>(x.index(0, 0, 4, 4))] = 1.0f;
  Tensor y = conv2d(x, spec, w, Tensor{});
  for (int64_t r = 0; r < 9; ++r) {
    for (int64_t c = 0; c < 9; ++c) {
      bool on_lattice = (r == 2 || r == 4 || r == 6) && (c == 2 || c == 4 || c == 6);
      CHECK(y.at(0, 0, r, c) == (on_lattice ? 1.0f : 0.0f));
    }
  }
}

TEST_CASE("conv matches the straight-line oracle") {
  for (int64_t d : {1, 2, 3}) {
    ConvSpec spec = ConvSpec::same(3, 4, 3, d);
    Tensor x = uniform({2, 3, 7, 6}, 10 + d);
    Tensor w = uniform(spec.weight_shape(), 20 + d);
    Tensor b = uniform({1, 4, 1, 1}, 30 + d);
    Tensor y = conv2d(x, spec, w, b);
    auto ref = reference::conv(reference::from_tensor(x), reference::from_tensor(w),
                               std::vector<float>(b.data().begin(), b.data().end()), d, d);
    REQUIRE(static_cast<int64_t>(ref.v.size()) == y.numel());
    for (size_t i = 0; i < ref.v.size(); ++i) CHECK(y.data()[i] == ref.v[i]);
  }
}

TEST_CASE("conv rejects mismatched channels and even kernels") {
  ConvSpec spec = ConvSpec::same(3, 4, 3);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 5, 5}), spec, Tensor::zeros(spec.weight_shape()), Tensor{}),
                  ConfigError);
  CHECK_THROWS_AS(ConvSpec::same(1, 1, 2), ConfigError);
}

TEST_CASE("adaptive average pool") {
  Tensor x = iota({1, 1, 4, 4});
  CHECK(adaptive_avg_pool2d(x, {1, 1}).item() == doctest::Approx(8.5));
  Tensor y = adaptive_avg_pool2d(x, {2, 2});
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(3.5));
  CHECK(y.at(0, 0, 0, 1) == doctest::Approx(5.5));
  CHECK(y.at(0, 0, 1, 0) == doctest::Approx(11.5));
  CHECK(y.at(0, 0, 1, 1) == doctest::Approx(13.5));
}

TEST_CASE("pool then upsample preserves the mean when the grid divides the input") {
  Tensor x = uniform({1, 2, 12, 12}, 5);
  Tensor up = upsample_bilinear(adaptive_avg_pool2d(x, {3, 3}), {12, 12});
  CHECK(mean(up).item() == doctest::Approx(mean(x).item()).epsilon(1e-5));
}

TEST_CASE("bilinear upsampling of a row ramp") {
  Tensor x = Tensor::from_data({1, 1, 1, 2}, {0.0f, 1.0f});
  Tensor y = upsample_bilinear(x, {1, 4});
  std::vector<float> want{0.0f, 0.25f, 0.75f, 1.0f};
  for (int64_t i = 0; i < 4; ++i) CHECK(y.at(0, 0, 0, i) == doctest::Approx(want[static_cast<size_t>(i)]));
  // Constant input stays constant for any output size.
  Tensor c = upsample_bilinear(Tensor::full({1, 1, 3, 5}, 2.5f), {7, 6});
  for (float v : c.data()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("batch norm in train mode standardizes each channel") {
  Tensor x = uniform({4, 3, 5, 5}, 9, -3.0f, 5.0f);
  RunningStats stats = RunningStats::unrecorded(3);
  Tensor g = Tensor::full({1, 3, 1, 1}, 1.0f), b = Tensor::zeros({1, 3, 1, 1});
  Tensor y = batchnorm2d(x, g, b, stats, Mode::train);
  for (int64_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    int64_t n = 0;
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t r = 0; r < 5; ++r)
        for (int64_t q = 0; q < 5; ++q) {
          double v = y.at(i, c, r, q);
          s += v;
          s2 += v * v;
          ++n;
        }
    CHECK(std::abs(s / n) < 1e-5);
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK(stats.recorded);
}

TEST_CASE("batch norm of a constant input returns beta") {
  RunningStats stats = RunningStats::unrecorded(2);
  Tensor g = Tensor::full({1, 2, 1, 1}, 2.0f);
  Tensor b = Tensor::from_data({1, 2, 1, 1}, {0.5f, -1.5f});
  Tensor y = batchnorm2d(Tensor::full({2, 2, 3, 3}, 7.0f), g, b, stats, Mode::train);
  for (int64_t i = 0; i < 2; ++i) {
    CHECK(y.at(i, 0, 1, 1) == doctest::Approx(0.5));
    CHECK(y.at(i, 1, 2, 0) == doctest::Approx(-1.5));
  }
}

TEST_CASE("batch norm eval mode uses running statistics") {
  RunningStats stats = RunningStats::defaults(1);
  stats.mean = {2.0f};
  stats.var = {4.0f};
  Tensor g = Tensor::full({1, 1, 1, 1}, 3.0f), b = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor y = batchnorm2d(Tensor::full({1, 1, 1, 1}, 6.0f), g, b, stats, Mode::eval);
  CHECK(y.item() == doctest::Approx(3.0 * 4.0 / std::sqrt(4.0 + 1e-5) + 1.0));

  RunningStats fresh = RunningStats::unrecorded(1);
  CHECK_THROWS(batchnorm2d(Tensor::full({1, 1, 2, 2}, 1.0f), g, b, fresh, Mode::eval));
}

TEST_CASE("running statistics follow momentum 0.1 with unbiased variance") {
  RunningStats stats = RunningStats::defaults(1);
  Tensor x = Tensor::from_data({1, 1, 1, 4}, {1.0f, 2.0f, 3.0f, 4.0f});
  batchnorm2d(x, Tensor::full({1, 1, 1, 1}, 1.0f), Tensor::zeros({1, 1, 1, 1}), stats, Mode::train);
  CHECK(stats.mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
  CHECK(stats.var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3.0)));
}

TEST_CASE("activations and max pooling") {
  Tensor x = Tensor::from_data({1, 1, 1, 3}, {-1.0f, 0.0f, 2.0f});
  Tensor r = relu(x);
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 0.0f);
  CHECK(r.data()[2] == 2.0f);
  CHECK(sigmoid(Tensor::scalar(0.0f)).item() == doctest::Approx(0.5));
  CHECK(maxpool2d(iota({1, 1, 2, 2})).item() == 4.0f);
  Tensor odd = maxpool2d(iota({1, 1, 5, 5}));
  CHECK(odd.shape() == Shape{1, 1, 2, 2});
  CHECK(odd.at(0, 0, 1, 1) == 19.0f);
}

TEST_CASE("backward of simple graphs") {
  Tensor x = uniform({1, 2, 3, 3}, 4);
  x.set_requires_grad(true);
  sum(x).backward();
  for (float g : x.grad()) CHECK(g == 1.0f);

  Tensor s = Tensor::scalar(3.0f, true);
  sum(mul(s, s)).backward();
  CHECK(s.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("gradients accumulate across backward calls until cleared") {
  Tensor x = Tensor::scalar(2.0f, true);
  sum(scale(x, 3.0f)).backward();
  sum(scale(x, 3.0f)).backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  x.zero_grad();
  sum(scale(x, 3.0f)).backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
}

TEST_CASE("no-grad guard records no graph") {
  Tensor x = Tensor::scalar(1.0f, true);
  NoGradGuard guard;
  Tensor y = sigmoid(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward is pure") {
  Tensor x = uniform({1, 2, 6, 6}, 3);
  ConvSpec spec = ConvSpec::same(2, 2, 3, 2);
  Tensor w = uniform(spec.weight_shape(), 4);
  Tensor a = sigmoid(conv2d(x, spec, w, Tensor{}));
  Tensor b = sigmoid(conv2d(x, spec, w, Tensor{}));
  CHECK(testutil::same_bits(a, b));
}

TEST_CASE("non-finite values raise NumericError") {
  Tensor x = Tensor::from_data({1, 1, 1, 2}, {1.0f, std::nanf("")});
  CHECK_THROWS_AS(relu(x), NumericError);
  Tensor big = Tensor::full({1, 1, 1, 1}, 3e38f);
  CHECK_THROWS_AS(add(big, big), NumericError);
}

TEST_CASE("shape errors are reported") {
  CHECK_THROWS_AS(add(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 2, 3})), ConfigError);
  CHECK_THROWS_AS(concat_channels(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 2})), ConfigError);
  CHECK_THROWS(Tensor::from_data({1, 1, 2, 2}, {1.0f}));
}

TEST_CASE("pad and crop are inverse") {
  Tensor x = uniform({1, 2, 3, 5}, 8);
  Tensor p = pad_zero(x, 2, 3);
  CHECK(p.shape() == Shape{1, 2, 5, 8});
  CHECK(p.at(0, 1, 4, 7) == 0.0f);
  CHECK(testutil::same_bits(crop(p, {3, 5}), x));
}

TEST_CASE("gradcheck passes on conv and sigmoid") {
  ConvSpec spec = ConvSpec::same(2, 3, 3, 2);
  std::vector<Tensor> in{uniform({1, 2, 6, 5}, 1), uniform(spec.weight_shape(), 2), uniform({1, 3, 1, 1}, 3)};
  auto fn = [&](const std::vector<Tensor>& v) { return sigmoid(conv2d(v[0], spec, v[1], v[2])); };
  GradcheckReport r = gradcheck(fn, in);
  CHECK_MESSAGE(r.passed, r.summary());
}

TEST_CASE("gradcheck passes through relu and maxpool") {
  std::vector<Tensor> in{uniform({1, 2, 6, 6}, 11)};
  auto fn = [](const std::vector<Tensor>& v) { return maxpool2d(relu(v[0])); };
  GradcheckReport r = gradcheck(fn, in);
  CHECK_MESSAGE(r.passed, r.summary());
}

TEST_CASE("gradcheck detects an injected pullback fault") {
  SUBCASE("sigmoid") {
    testing::ScopedGradFault fault(testing::GradFault::flip_sigmoid);
    std::vector<Tensor> in{uniform({1, 1, 3, 3}, 5)};
    auto fn = [](const std::vector<Tensor>& v) { return sigmoid(v[0]); };
    CHECK_FALSE(gradcheck(fn, in).passed);
  }
  SUBCASE("conv input") {
    testing::ScopedGradFault fault(testing::GradFault::flip_conv_input);
    ConvSpec spec = ConvSpec::same(1, 1, 3);
    std::vector<Tensor> in{uniform({1, 1, 4, 4}, 6), uniform(spec.weight_shape(), 7)};
    auto fn = [&](const std::vector<Tensor>& v) { return conv2d(v[0], spec, v[1], Tensor{}); };
    CHECK_FALSE(gradcheck(fn, in).passed);
  }
}
