#include "mslae/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "mslae/error.hpp"

namespace mslae {

namespace {

void check_inputs(size_t n, std::span<const uint8_t> gt, std::span<const uint8_t> fov, const char* what) {
  if (gt.size() != n) throw ConfigError(std::string(what) + ": prediction and ground truth lengths differ");
  if (!fov.empty() && fov.size() != n) throw ConfigError(std::string(what) + ": FOV mask length differs");
  for (uint8_t v : gt)
    if (v > 1) throw ConfigError(std::string(what) + ": ground truth must be binary");
  for (uint8_t v : fov)
    if (v > 1) throw ConfigError(std::string(what) + ": FOV mask must be binary");
}

std::optional<double> ratio(uint64_t num, uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

struct Ranked {
  std::vector<float> scores;
  std::vector<uint8_t> labels;
};

Ranked select(std::span<const float> scores, std::span<const uint8_t> gt, std::span<const uint8_t> fov) {
  check_inputs(scores.size(), gt, fov, "auroc");
  Ranked r;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!fov.empty() && fov[i] == 0) continue;
    r.scores.push_back(scores[i]);
    r.labels.push_back(gt[i]);
  }
  return r;
}

std::optional<double> mann_whitney(const std::vector<float>& scores, const std::vector<uint8_t>& labels) {
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  uint64_t positives = 0;
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1 .. j share their mean.
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum += midrank;
        ++positives;
      }
    i = j;
  }
  const uint64_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;
  const double p = static_cast<double>(positives);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

void mean_into(std::optional<double>& out, double sum, int count) {
  if (count > 0) out = sum / count;
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

ConfusionCounts confusion(std::span<const uint8_t> pred, std::span<const uint8_t> gt, std::span<const uint8_t> fov) {
  check_inputs(pred.size(), gt, fov, "confusion");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1) throw ConfigError("confusion: prediction must be binary");
    if (!fov.empty() && fov[i] == 0) continue;
    if (pred[i]) {
      gt[i] ? ++c.tp : ++c.fp;
    } else {
      gt[i] ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

std::optional<double> sensitivity(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }
std::optional<double> specificity(const ConfusionCounts& c) { return ratio(c.tn, c.tn + c.fp); }
std::optional<double> accuracy(const ConfusionCounts& c) { return ratio(c.tp + c.tn, c.total()); }

std::vector<uint8_t> binarize(std::span<const float> scores, double threshold) {
  std::vector<uint8_t> out(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? 1 : 0;
  return out;
}

std::vector<RocPoint> roc_curve(std::span<const float> scores, std::span<const uint8_t> gt,
                                std::span<const uint8_t> fov) {
  Ranked r = select(scores, gt, fov);
  const size_t n = r.scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return r.scores[a] > r.scores[b]; });
  uint64_t positives = 0;
  for (uint8_t v : r.labels) positives += v;
  const uint64_t negatives = n - positives;
  std::vector<RocPoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  uint64_t tp = 0, fp = 0;
  for (size_t i = 0; i < n;) {
    const float t = r.scores[order[i]];
    while (i < n && r.scores[order[i]] == t) {
      r.labels[order[i]] ? ++tp : ++fp;
      ++i;
    }
    curve.push_back({t, positives ? static_cast<double>(tp) / positives : 0.0,
                     negatives ? static_cast<double>(fp) / negatives : 0.0});
  }
  if (curve.back().tpr != 1.0 || curve.back().fpr != 1.0) curve.push_back({-std::numeric_limits<double>::infinity(), 1.0, 1.0});
  return curve;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  return area;
}

std::optional<double> auroc(std::span<const float> scores, std::span<const uint8_t> gt, std::span<const uint8_t> fov) {
  Ranked r = select(scores, gt, fov);
  return mann_whitney(r.scores, r.labels);
}

ImageMetrics image_metrics(const std::string& id, std::span<const float> scores, std::span<const uint8_t> gt,
                           std::span<const uint8_t> fov, double threshold) {
  ImageMetrics m;
  m.id = id;
  const std::vector<uint8_t> pred = binarize(scores, threshold);
  m.counts = confusion(pred, gt, fov);
  m.values.se = sensitivity(m.counts);
  m.values.sp = specificity(m.counts);
  m.values.acc = accuracy(m.counts);
  m.values.auroc = auroc(scores, gt, fov);
  return m;
}

DatasetReport dataset_report(std::vector<ImageMetrics> images) {
  if (images.empty()) throw ConfigError("dataset_report: at least one image is required");
  DatasetReport r;
  for (const ImageMetrics& m : images) r.pooled += m.counts;
  r.micro.se = sensitivity(r.pooled);
  r.micro.sp = specificity(r.pooled);
  r.micro.acc = accuracy(r.pooled);
  double s[4] = {0, 0, 0, 0};
  int n[4] = {0, 0, 0, 0};
  for (const ImageMetrics& m : images) {
    const std::optional<double>* v[4] = {&m.values.se, &m.values.sp, &m.values.acc, &m.values.auroc};
    for (int k = 0; k < 4; ++k)
      if (v[k]->has_value()) {
        s[k] += **v[k];
        ++n[k];
      }
  }
  mean_into(r.macro.se, s[0], n[0]);
  mean_into(r.macro.sp, s[1], n[1]);
  mean_into(r.macro.acc, s[2], n[2]);
  mean_into(r.macro.auroc, s[3], n[3]);
  r.images = std::move(images);
  return r;
}

const ImageMetrics& MetricAccumulator::add(const std::string& id, std::span<const float> scores,
                                           std::span<const uint8_t> gt, std::span<const uint8_t> fov) {
  images_.push_back(image_metrics(id, scores, gt, fov, threshold_));
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!fov.empty() && fov[i] == 0) continue;
    scores_.push_back(scores[i]);
    labels_.push_back(gt[i]);
  }
  return images_.back();
}

DatasetReport MetricAccumulator::report() const {
  DatasetReport r = dataset_report(images_);
  r.micro.auroc = mann_whitney(scores_, labels_);
  return r;
}

}  // namespace mslae
