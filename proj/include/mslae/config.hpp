#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>

#include "mslae/data.hpp"
#include "mslae/losses.hpp"
#include "mslae/network.hpp"
#include "mslae/trainer.hpp"

namespace mslae {

enum class Aggregation { micro, macro, both };
const char* to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& text);

struct SyntheticDataConfig {
  int64_t train_count = 0;
  int64_t eval_count = 0;
  int64_t height = 64;
  int64_t width = 64;
  bool operator==(const SyntheticDataConfig&) const = default;
};

struct DataConfig {
  std::string train_manifest;
  std::string eval_manifest;  // validation during training
  std::string test_manifest;  // used by `eval` when set
  // Without an eval manifest, the last `holdout` training entries validate.
  int64_t holdout = 2;
  NormalizeMode normalize = NormalizeMode::per_image_standardize;
  SyntheticDataConfig synthetic;
  bool operator==(const DataConfig&) const = default;
};

struct MetricsConfig {
  double threshold = 0.5;
  bool use_fov = true;
  Aggregation aggregation = Aggregation::both;
  bool operator==(const MetricsConfig&) const = default;
};

struct TrainSection {
  double learning_rate = 1e-4;
  int64_t batch_size = 22;
  int64_t epochs = 70;
  int64_t max_steps = 0;
  int64_t eval_every = 1;
  bool augment = true;
  AdamConfig adam;
  PatchConfig patch;
  bool operator==(const TrainSection&) const = default;
};

/// Whole run description. Every field has a default, unknown keys are errors,
/// and relative paths resolve against the directory of the config file.
struct RunConfig {
  uint64_t seed = 0;
  std::string output_dir = "runs/default";
  NetworkConfig network;
  LossConfig loss;
  TrainSection train;
  AugmentationConfig augment;  // seed ignored; derived from `seed`
  DataConfig data;
  MetricsConfig metrics;

  std::filesystem::path base_dir;  // not serialized

  void validate() const;
  bool operator==(const RunConfig& o) const;

  std::filesystem::path resolve(const std::string& p) const;
  std::filesystem::path output_path() const { return resolve(output_dir); }
  TrainConfig train_config() const;
  EvalConfig eval_config() const { return {metrics.threshold, metrics.use_fov}; }
};

nlohmann::json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace mslae
