#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mslae/modules.hpp"

namespace mslae {

struct NetworkConfig {
  std::vector<int64_t> encoder_channels{16, 64, 128, 256};
  int64_t bottleneck_channels = 512;
  int64_t aggregation_channels = 16;
  int64_t input_channels = 3;
  bool enable_ddpp = true;
  bool enable_sa = true;

  // Mirror of the encoder list, deepest level first.
  std::vector<int64_t> decoder_channels() const;
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

/// Trainable parameters, BN statistics, and the configuration they were built for.
struct ModelState {
  NetworkConfig config;
  uint64_t seed = 0;
  ParameterSet params;

  ModelState clone() const;
};

/// Registers every tensor the configuration needs, zero-filled (BN gamma = 1).
ModelState build_state(const NetworkConfig& config);

/// Conv weights ~ Normal(0, sqrt(2 / fan_in)), drawn in registration order
/// from a generator seeded with `seed`; biases 0, BN gamma 1 / beta 0.
ModelState init_he_normal(const NetworkConfig& config, uint64_t seed);

struct ParamBreakdown {
  int64_t total = 0;
  // Module prefix (enc1.., bottleneck, dec4.., enc_agg, dec_agg, fusion, head) -> count.
  std::vector<std::pair<std::string, int64_t>> modules;
};

int64_t param_count(const ModelState& state);
ParamBreakdown param_breakdown(const ModelState& state);

/// Projects each tap with its own 1x1 conv to the aggregation width, resizes
/// bilinearly to `target`, and sums level by level.
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(ParameterSet& params, const std::string& name, const std::vector<int64_t>& tap_channels,
             int64_t out_channels);

  Tensor forward(const std::vector<Tensor>& taps, Hw target) const;
  const std::vector<ConvLayer>& projections() const { return projections_; }

 private:
  std::vector<ConvLayer> projections_;
};

struct ForwardTrace {
  Hw input_size;
  Hw padded_size;
  std::vector<EBlockOutput> encoder;  // level 1 first
  Tensor bottleneck;
  std::vector<DBlockOutput> decoder;  // level 4 first
  Tensor encoder_aggregate;
  Tensor decoder_aggregate;
  Tensor fused;
  Tensor probabilities;  // cropped back to the input size
};

/// Multi-scale multi-level attention network.
///
/// Encoder: four E-Blocks, each followed by 2x2 max pooling; bottleneck
/// ConvBlock; decoder: four D-Blocks consuming the E-Block outputs as skips.
/// Encoder taps (D-DPP and SA branch outputs) and decoder taps are each
/// aggregated at full resolution; their sum goes through a 3x3 fusion conv
/// and is added to the projected decoder output before the 1x1 sigmoid head.
///
/// Inputs are zero-padded at the bottom/right to a multiple of 16 (at least
/// 48, so the level-4 D-DPP can pool to 6x6) and the output is cropped back.
class Network {
 public:
  // Binds to the tensors in `state`; the network shares them, it does not copy.
  explicit Network(ModelState& state);

  Tensor forward(const Tensor& x, Mode mode, bool pad = true) const { return trace(x, mode, pad).probabilities; }
  ForwardTrace trace(const Tensor& x, Mode mode, bool pad = true) const;

  Tensor aggregate_encoder(const std::vector<EBlockOutput>& taps, Hw target) const;
  Tensor aggregate_decoder(const std::vector<DBlockOutput>& taps, Hw target) const;

  const NetworkConfig& config() const { return config_; }
  const std::vector<EBlock>& encoder() const { return encoder_; }
  const std::vector<DBlock>& decoder() const { return decoder_; }
  const Aggregator& encoder_aggregator() const { return enc_agg_; }
  const Aggregator& decoder_aggregator() const { return dec_agg_; }
  const ConvLayer& fusion() const { return fusion_; }
  const ConvLayer& decoder_projection() const { return dec_proj_; }
  const ConvLayer& head() const { return head_; }

  static Hw padded_size(Hw input);

 private:
  NetworkConfig config_;
  std::vector<EBlock> encoder_;
  ConvBlock bottleneck_;
  std::vector<DBlock> decoder_;
  Aggregator enc_agg_;
  Aggregator dec_agg_;
  ConvLayer fusion_;
  ConvLayer dec_proj_;
  ConvLayer head_;
};

struct LevelSummary {
  std::string stage;  // "encoder", "bottleneck", "decoder"
  int level = 0;
  int64_t channels = 0;
  Hw spatial;
  int64_t dilation = 0;         // 0 where no D-DPP runs
  int64_t receptive_field = 0;  // 0 where no D-DPP runs
  bool ddpp = false;
  bool sa = false;
  int64_t params = 0;
};

/// Per-level table for a given input size (after padding).
std::vector<LevelSummary> describe(const ModelState& state, Hw input);

}  // namespace mslae
