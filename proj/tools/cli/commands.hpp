#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cli/verify.hpp"
#include "mslae/config.hpp"
#include "mslae/metrics.hpp"
#include "mslae/network.hpp"

namespace mslae::cli {

namespace fs = std::filesystem;

// 0 success, 1 runtime failure, 2 configuration or usage error.
enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2 };

// Maps an exception escaping a command to its exit code.
int exit_code_for(const std::exception& e);

struct TrainOptions {
  fs::path config;
  bool resume = false;
};
int cmd_train(const TrainOptions& options, std::ostream& out, std::ostream& err);

struct EvalOptions {
  fs::path config;
  fs::path checkpoint;   // evaluate the model, or
  fs::path predictions;  // score <id>_prob.png files written by predict
  std::optional<bool> use_fov;
  std::optional<double> threshold;
  fs::path out_dir;  // default <output_dir>/eval
};
int cmd_eval(const EvalOptions& options, std::ostream& out, std::ostream& err);

struct PredictOptions {
  std::optional<fs::path> config;
  fs::path checkpoint;
  std::vector<fs::path> images;
  // FOV masks paired with `images` by position; standardization then uses
  // FOV pixels only, as in training and eval.
  std::vector<fs::path> fovs;
  fs::path manifest;  // adds every manifest entry (image and FOV)
  std::optional<double> threshold;
  fs::path out_dir;  // default <output_dir>/predictions
};
int cmd_predict(const PredictOptions& options, std::ostream& out, std::ostream& err);

int cmd_verify(const SuiteOptions& options, std::ostream& out, std::ostream& err);

struct InspectOptions {
  std::optional<fs::path> config;
  std::string ablation;  // "", "sa-only" or "ddpp-only"; overrides the config
  Hw input{584, 565};
  bool forward = false;  // run an eval-mode forward and report the measured output size
};
int cmd_inspect(const InspectOptions& options, std::ostream& out, std::ostream& err);

struct SynthOptions {
  fs::path out_dir;
  int64_t count = 4;
  Hw size{64, 64};
  uint64_t seed = 0;
  Split split = Split::train;
};
int cmd_synth(const SynthOptions& options, std::ostream& out, std::ostream& err);

// ---- pieces shared with the tests ---------------------------------------------

struct InspectReport {
  NetworkConfig config;
  Hw input;
  Hw padded;
  std::vector<LevelSummary> levels;
  ParamBreakdown params;
  std::optional<Hw> measured_output;
};
InspectReport inspect_model(const NetworkConfig& config, Hw input, bool forward);
void print_inspect(std::ostream& out, const InspectReport& report);

// Loads training and validation sets as the config describes, normalized.
TrainData load_train_data(const RunConfig& config, std::vector<std::string>* warnings = nullptr);
// test_manifest if set, otherwise the validation set of load_train_data.
std::vector<Sample> load_eval_data(const RunConfig& config, std::vector<std::string>* warnings = nullptr);

nlohmann::json report_to_json(const DatasetReport& report, const EvalConfig& eval, Aggregation aggregation);
void write_report_tsv(const DatasetReport& report, Aggregation aggregation, const fs::path& path);
void print_report(std::ostream& out, const DatasetReport& report, Aggregation aggregation);

}  // namespace mslae::cli
