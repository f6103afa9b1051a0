#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mslae {

struct ConfusionCounts {
  uint64_t tp = 0;
  uint64_t fp = 0;
  uint64_t tn = 0;
  uint64_t fn = 0;

  uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Counts over pixels where `fov` is 1, or all pixels when `fov` is empty.
/// All inputs must be 0/1 and of equal length.
ConfusionCounts confusion(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                          std::span<const uint8_t> fov = {});

// std::nullopt marks an undefined ratio (zero denominator).
std::optional<double> sensitivity(const ConfusionCounts& c);
std::optional<double> specificity(const ConfusionCounts& c);
std::optional<double> accuracy(const ConfusionCounts& c);

std::vector<uint8_t> binarize(std::span<const float> scores, double threshold);

struct RocPoint {
  double threshold;
  double tpr;
  double fpr;
};

/// Exact threshold sweep from (0,0) to (1,1), one point per distinct score.
std::vector<RocPoint> roc_curve(std::span<const float> scores, std::span<const uint8_t> gt,
                                std::span<const uint8_t> fov = {});
double trapezoid_area(const std::vector<RocPoint>& curve);

/// Mann-Whitney estimate with midranks for ties:
///   (sum of positive ranks - P(P+1)/2) / (P N).
/// Undefined unless both classes occur inside the FOV.
std::optional<double> auroc(std::span<const float> scores, std::span<const uint8_t> gt,
                            std::span<const uint8_t> fov = {});

struct MetricValues {
  std::optional<double> se;
  std::optional<double> sp;
  std::optional<double> acc;
  std::optional<double> auroc;
};

struct ImageMetrics {
  std::string id;
  ConfusionCounts counts;
  MetricValues values;
};

ImageMetrics image_metrics(const std::string& id, std::span<const float> scores, std::span<const uint8_t> gt,
                           std::span<const uint8_t> fov, double threshold);

struct DatasetReport {
  std::vector<ImageMetrics> images;
  ConfusionCounts pooled;
  MetricValues micro;  // from pooled counts (and pooled scores when available)
  MetricValues macro;  // mean over images where each value is defined
};

/// Micro Se/Sp/Acc from pooled counts and macro means of every per-image
/// value. Micro AUROC needs the raw scores and is left undefined here.
DatasetReport dataset_report(std::vector<ImageMetrics> images);

/// Collects per-image results plus pooled scores so micro AUROC is available.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(double threshold = 0.5) : threshold_(threshold) {}

  const ImageMetrics& add(const std::string& id, std::span<const float> scores, std::span<const uint8_t> gt,
                          std::span<const uint8_t> fov = {});
  DatasetReport report() const;
  bool empty() const { return images_.empty(); }

 private:
  double threshold_;
  std::vector<ImageMetrics> images_;
  std::vector<float> scores_;
  std::vector<uint8_t> labels_;
};

}  // namespace mslae
