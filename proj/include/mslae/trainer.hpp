#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "mslae/data.hpp"
#include "mslae/error.hpp"
#include "mslae/losses.hpp"
#include "mslae/metrics.hpp"
#include "mslae/network.hpp"

namespace mslae {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
  bool operator==(const AdamConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// First and second moments per parameter, in parameter order.
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// Bias-corrected Adam on every tensor in `params`, reading their grads
/// (absent grad = 0). A non-finite gradient aborts before any tensor changes.
void adam_step(std::span<const NamedTensor> params, AdamState& state, double lr, const AdamConfig& cfg);

struct PatchConfig {
  int64_t size = 0;    // 0 trains on full images
  int64_t stride = 0;  // 0 means non-overlapping (= size)
  bool operator==(const PatchConfig&) const = default;
};

struct EvalConfig {
  double threshold = 0.5;
  bool use_fov = true;
  bool operator==(const EvalConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int64_t batch_size = 22;
  int64_t epochs = 70;
  int64_t max_steps = 0;  // 0 = no cap; otherwise stop after this many optimizer steps
  AdamConfig adam;
  LossConfig loss;
  uint64_t seed = 0;
  int64_t eval_every = 1;
  std::filesystem::path checkpoint_dir;  // empty disables checkpointing
  bool augment = true;
  AugmentationConfig augmentation;  // seed is taken from `seed`
  PatchConfig patch;
  EvalConfig eval;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct StepRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  double loss = 0.0;
};

struct EvalSnapshot {
  int64_t epoch = 0;
  int64_t step = 0;
  MetricValues micro;
  MetricValues macro;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EvalSnapshot> evals;
  std::vector<double> epoch_seconds;  // wall clock, kept out of history_to_json
  int64_t epochs_completed = 0;
  int64_t best_epoch = -1;
  double best_accuracy = -1.0;
};

/// Deterministic part of the history (no wall clock).
nlohmann::json history_to_json(const TrainHistory& h);
TrainHistory history_from_json(const nlohmann::json& j);
nlohmann::json timing_to_json(const TrainHistory& h);

struct TrainData {
  std::vector<Sample> train;
  std::vector<Sample> eval;  // never modified; may be empty
};

struct TrainHooks {
  // Called before each optimizer step with the global step index (0-based).
  std::function<void(int64_t step, ModelState& state)> before_step;
  std::function<void(const std::string& line)> log;
};

struct TrainResult {
  ModelState state;
  TrainHistory history;
};

/// Thrown when a non-finite loss or gradient stops training; the last
/// checkpoint written before the failure is left in place.
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

/// Epoch order is a seeded shuffle keyed by (seed, epoch); augmentation draws
/// are keyed by (seed, epoch, sample index). With a checkpoint_dir, last.ckpt
/// is written after every epoch (with optimizer state for resuming) and
/// best.ckpt whenever eval accuracy improves.
TrainResult train(ModelState init, const TrainData& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Continues from a last.ckpt written by train() with the same configuration.
TrainResult resume_training(const std::filesystem::path& checkpoint, const TrainData& data, const TrainConfig& cfg,
                            const TrainHooks& hooks = {});

/// Eval-mode full-image forward (pad/crop), no gradient tracking. Returns 1x1xHxW.
Tensor predict(const ModelState& state, const Tensor& image);

DatasetReport evaluate(const ModelState& state, const std::vector<Sample>& dataset, const EvalConfig& cfg,
                       std::vector<Tensor>* probabilities = nullptr);

/// Metrics for precomputed probability maps (one per sample, 1x1xHxW).
DatasetReport evaluate_predictions(const std::vector<Sample>& dataset, const std::vector<Tensor>& probabilities,
                                   const EvalConfig& cfg);

std::vector<uint8_t> to_binary(const Tensor& t);

}  // namespace mslae
