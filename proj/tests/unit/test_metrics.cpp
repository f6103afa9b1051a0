#include <doctest.h>

#include <cmath>
#include <random>

#include "mslae/error.hpp"
#include "mslae/metrics.hpp"
#include "reference/reference.hpp"

using namespace mslae;

namespace {

std::vector<float> ones_to_scores(const std::vector<uint8_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("confusion counts") {
  std::vector<uint8_t> pred{1, 1, 0, 0}, gt{1, 0, 1, 0};
  ConfusionCounts c = confusion(pred, gt);
  CHECK(c == ConfusionCounts{1, 1, 1, 1});
  CHECK(*sensitivity(c) == 0.5);
  CHECK(*specificity(c) == 0.5);
  CHECK(*accuracy(c) == 0.5);

  ConfusionCounts same = confusion(gt, gt);
  CHECK(same.fp == 0);
  CHECK(same.fn == 0);
  CHECK(*sensitivity(same) == 1.0);
  CHECK(*specificity(same) == 1.0);
  CHECK(*accuracy(same) == 1.0);

  std::vector<uint8_t> inv{0, 1, 0, 1};
  ConfusionCounts opposite = confusion(inv, gt);
  CHECK(opposite.tp == 0);
  CHECK(opposite.tn == 0);

  std::vector<uint8_t> fov{1, 1, 0, 0};
  CHECK(confusion(pred, gt, fov) == ConfusionCounts{1, 1, 0, 0});

  std::vector<uint8_t> bad{2, 0, 0, 0};
  CHECK_THROWS_AS(confusion(bad, gt), ConfigError);
  CHECK_THROWS_AS(confusion(std::vector<uint8_t>{1, 0}, gt), ConfigError);
}

TEST_CASE("undefined ratios are distinct from zero") {
  std::vector<uint8_t> pred{0, 1, 0}, gt{0, 0, 0};
  ConfusionCounts c = confusion(pred, gt);
  CHECK_FALSE(sensitivity(c).has_value());
  REQUIRE(specificity(c).has_value());
  CHECK(*specificity(c) == doctest::Approx(2.0 / 3.0));
  CHECK_FALSE(accuracy(ConfusionCounts{}).has_value());
  std::vector<float> s{0.1f, 0.2f, 0.3f};
  CHECK_FALSE(auroc(s, gt).has_value());
}

TEST_CASE("counts agree with a pixel recount on random pairs") {
  std::mt19937_64 g(1);
  for (int trial = 0; trial < 100; ++trial) {
    size_t n = 1 + g() % 300;
    std::vector<uint8_t> p(n), t(n), f(trial % 2 ? n : 0);
    for (size_t i = 0; i < n; ++i) {
      p[i] = g() & 1;
      t[i] = g() & 1;
      if (!f.empty()) f[i] = g() & 1;
    }
    ConfusionCounts c = confusion(p, t, f);
    reference::Counts r = reference::recount(p, t, f);
    REQUIRE(c.tp == r.tp);
    REQUIRE(c.fp == r.fp);
    REQUIRE(c.tn == r.tn);
    REQUIRE(c.fn == r.fn);
    if (auto acc = accuracy(c)) {
      double P = static_cast<double>(c.tp + c.fn), N = static_cast<double>(c.tn + c.fp);
      double se = sensitivity(c).value_or(0.0), sp = specificity(c).value_or(0.0);
      CHECK(*acc == doctest::Approx((se * P + sp * N) / (P + N)).epsilon(1e-12));
    }
  }
}

TEST_CASE("AUROC fixtures") {
  std::vector<float> s{0.9f, 0.8f, 0.7f, 0.4f, 0.3f, 0.2f};
  std::vector<uint8_t> gt{1, 1, 0, 1, 0, 0};
  CHECK(*auroc(s, gt) == doctest::Approx(8.0 / 9.0));
  CHECK(*reference::pair_auroc(s, gt) == doctest::Approx(8.0 / 9.0));
  CHECK(trapezoid_area(roc_curve(s, gt)) == doctest::Approx(8.0 / 9.0));

  std::vector<uint8_t> sep{1, 1, 1, 0, 0, 0};
  CHECK(*auroc(s, sep) == 1.0);

  std::vector<float> tied(6, 0.5f);
  CHECK(*auroc(tied, gt) == 0.5);

  std::vector<float> four{0.5f, 0.5f, 0.5f, 0.5f};
  std::vector<uint8_t> gt4{1, 0, 1, 0};
  CHECK(*auroc(four, gt4) == 0.5);
}

TEST_CASE("ROC curve runs from the origin to (1,1) monotonically") {
  std::mt19937_64 g(3);
  std::vector<float> s(200);
  std::vector<uint8_t> t(200);
  for (size_t i = 0; i < s.size(); ++i) {
    s[i] = static_cast<float>(g() % 20) / 20.0f;
    t[i] = g() & 1;
  }
  auto curve = roc_curve(s, t);
  REQUIRE(curve.size() >= 2);
  CHECK(curve.front().tpr == 0.0);
  CHECK(curve.front().fpr == 0.0);
  CHECK(curve.back().tpr == 1.0);
  CHECK(curve.back().fpr == 1.0);
  for (size_t i = 1; i < curve.size(); ++i) {
    CHECK(curve[i].tpr >= curve[i - 1].tpr);
    CHECK(curve[i].fpr >= curve[i - 1].fpr);
  }
  CHECK(trapezoid_area(curve) == doctest::Approx(*auroc(s, t)).epsilon(1e-12));
}

TEST_CASE("AUROC invariances") {
  std::mt19937_64 g(5);
  std::uniform_real_distribution<float> u(0.01f, 0.99f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> s(64), warped(64), flipped(64);
    std::vector<uint8_t> t(64);
    for (size_t i = 0; i < s.size(); ++i) {
      s[i] = u(g);
      t[i] = g() & 1;
      warped[i] = std::exp(3.0f * s[i]) - 2.0f;
      flipped[i] = 1.0f - s[i];
    }
    t[0] = 1;
    t[1] = 0;
    double a = *auroc(s, t);
    CHECK(*auroc(warped, t) == doctest::Approx(a).epsilon(1e-12));
    CHECK(*auroc(flipped, t) == doctest::Approx(1.0 - a).epsilon(1e-9));
    CHECK(a == doctest::Approx(*reference::pair_auroc(s, t)).epsilon(1e-12));
  }
}

TEST_CASE("binarization threshold is inclusive") {
  std::vector<float> s{0.49f, 0.5f, 0.51f};
  auto b = binarize(s, 0.5);
  CHECK(b == std::vector<uint8_t>{0, 1, 1});
}

TEST_CASE("micro and macro aggregation") {
  SUBCASE("one image") {
    std::vector<uint8_t> gt{1, 0, 1, 0};
    std::vector<float> s{0.9f, 0.6f, 0.2f, 0.1f};
    DatasetReport r = dataset_report({image_metrics("a", s, gt, {}, 0.5)});
    CHECK(*r.micro.se == *r.macro.se);
    CHECK(*r.micro.sp == *r.macro.sp);
    CHECK(*r.micro.acc == *r.macro.acc);
  }
  SUBCASE("two images with different counts") {
    std::vector<uint8_t> gt_a{1, 0, 1, 0}, pred_a{1, 1, 0, 0};
    std::vector<uint8_t> gt_b{1, 1, 1, 0}, pred_b{1, 1, 1, 1};
    DatasetReport r = dataset_report({image_metrics("a", ones_to_scores(pred_a), gt_a, {}, 0.5),
                                      image_metrics("b", ones_to_scores(pred_b), gt_b, {}, 0.5)});
    CHECK(r.pooled == ConfusionCounts{4, 2, 1, 1});
    CHECK(*r.micro.se == doctest::Approx(4.0 / 5.0));
    CHECK(*r.micro.sp == doctest::Approx(1.0 / 3.0));
    CHECK(*r.macro.se == doctest::Approx(0.75));
    CHECK(*r.macro.sp == doctest::Approx(0.25));
    CHECK(*r.micro.acc == doctest::Approx(5.0 / 8.0));
    CHECK(*r.macro.acc == doctest::Approx(0.625));
  }
  SUBCASE("macro skips undefined per-image values") {
    std::vector<uint8_t> bg{0, 0, 0, 0}, gt{1, 0, 1, 0};
    std::vector<float> s{0.9f, 0.1f, 0.8f, 0.2f};
    DatasetReport r = dataset_report({image_metrics("bg", s, bg, {}, 0.5), image_metrics("fg", s, gt, {}, 0.5)});
    CHECK_FALSE(r.images[0].values.se.has_value());
    CHECK(*r.macro.se == 1.0);
    CHECK_FALSE(r.micro.auroc.has_value());
  }
}

TEST_CASE("accumulator pools scores for micro AUROC") {
  MetricAccumulator acc(0.5);
  std::vector<uint8_t> g1{1, 0}, g2{1, 0};
  std::vector<float> s1{0.9f, 0.1f}, s2{0.3f, 0.5f};
  acc.add("a", s1, g1);
  acc.add("b", s2, g2);
  DatasetReport r = acc.report();
  REQUIRE(r.micro.auroc.has_value());
  // Pooled pairs: 0.9 beats both negatives, 0.3 beats only 0.1.
  CHECK(*r.micro.auroc == doctest::Approx(0.75));
  CHECK(*r.macro.auroc == doctest::Approx(0.5));
}
