#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "mslae/params.hpp"

namespace mslae {

/// 3x3 conv -> BN -> ReLU, "same" padding.
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(ParameterSet& params, const std::string& name, int64_t in_channels, int64_t out_channels);
  Tensor forward(const Tensor& x, Mode mode) const;

  const ConvLayer& conv() const { return conv_; }
  const BatchNormLayer& bn() const { return bn_; }

 private:
  ConvLayer conv_;
  BatchNormLayer bn_;
};

/// Convolutional block used by both SA paths and the bottleneck: two ConvBnRelu
/// stages, in -> out then out -> out. Spatial size is preserved.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(ParameterSet& params, const std::string& name, int64_t in_channels, int64_t out_channels);
  Tensor forward(const Tensor& x, Mode mode) const;

  const ConvBnRelu& first() const { return first_; }
  const ConvBnRelu& second() const { return second_; }

 private:
  ConvBnRelu first_;
  ConvBnRelu second_;
};

inline constexpr int kLevels = 4;
inline constexpr std::array<int64_t, 3> kPoolGrids{1, 3, 6};

struct DDPPConfig {
  int64_t channels = 1;
  int64_t dilation_rate = 1;
  std::array<int64_t, 3> pool_grids = kPoolGrids;

  // Dilation is bound to the encoder level: level i uses rate i.
  static DDPPConfig for_level(int64_t channels, int level);
  void validate() const;
};

/// Dynamic dilated pyramid pooling.
///
/// For each grid g in {1, 3, 6}: adaptive-average-pool to g x g, 3x3 conv at
/// the level's dilation (C -> C, same padding), bilinear upsample back to
/// H x W. The three branches are summed in grid order and the input is added
/// last, so zero branch parameters give the identity map.
class DDPPModule {
 public:
  DDPPModule() = default;
  DDPPModule(ParameterSet& params, const std::string& name, const DDPPConfig& config);

  Tensor forward(const Tensor& x) const;
  const DDPPConfig& config() const { return config_; }
  const std::array<ConvLayer, 3>& branches() const { return branches_; }

 private:
  DDPPConfig config_;
  std::array<ConvLayer, 3> branches_;
};

struct SAConfig {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  Hw attention_pool{2, 2};
  void validate() const;
};

struct SAParts {
  Tensor residual;   // main path, ConvBlock(x)
  Tensor attention;  // upsample(sigmoid(ConvBlock(avgpool(x))))
  Tensor output;
};

/// Squeeze-and-attention: output = attention * residual + attention.
class SAModule {
 public:
  SAModule() = default;
  SAModule(ParameterSet& params, const std::string& name, const SAConfig& config);

  Tensor forward(const Tensor& x, Mode mode) const { return forward_parts(x, mode).output; }
  SAParts forward_parts(const Tensor& x, Mode mode) const;
  // The gating algebra on its own, for intercepted attention / residual maps.
  static Tensor combine(const Tensor& attention, const Tensor& residual);

  const SAConfig& config() const { return config_; }
  const ConvBlock& main_path() const { return main_; }
  const ConvBlock& attention_path() const { return attention_; }

 private:
  SAConfig config_;
  ConvBlock main_;
  ConvBlock attention_;
};

struct EBlockConfig {
  int64_t in_channels = 3;
  int64_t out_channels = 16;
  int level = 1;
  bool enable_ddpp = true;
  bool enable_sa = true;
  void validate() const;
};

struct EBlockOutput {
  Tensor out;
  Tensor ddpp_tap;
  Tensor sa_tap;
};

/// Encoder block: entry ConvBnRelu (in -> out) feeding D-DPP and SA in
/// parallel; output is their elementwise sum. A disabled branch is replaced
/// by the entry activation.
class EBlock {
 public:
  EBlock() = default;
  EBlock(ParameterSet& params, const std::string& name, const EBlockConfig& config);

  EBlockOutput forward(const Tensor& x, Mode mode) const;
  const EBlockConfig& config() const { return config_; }
  const ConvBnRelu& entry() const { return entry_; }
  const std::optional<DDPPModule>& ddpp() const { return ddpp_; }
  const std::optional<SAModule>& sa() const { return sa_; }

 private:
  EBlockConfig config_;
  ConvBnRelu entry_;
  std::optional<DDPPModule> ddpp_;
  std::optional<SAModule> sa_;
};

struct DBlockConfig {
  int64_t in_channels = 32;    // channels arriving from the level below
  int64_t skip_channels = 16;  // encoder skip at this level
  int64_t out_channels = 16;
  bool enable_ddpp = true;     // decoder blocks carry no D-DPP; kept for symmetry with EBlockConfig
  bool enable_sa = true;       // false: plain ConvBlock in place of SA
  void validate() const;
};

struct DBlockOutput {
  Tensor out;
  Tensor sa_tap;
};

/// Decoder block: bilinear x2 upsample, channel concat with the skip, SA.
class DBlock {
 public:
  DBlock() = default;
  DBlock(ParameterSet& params, const std::string& name, const DBlockConfig& config);

  DBlockOutput forward(const Tensor& x, const Tensor& skip, Mode mode) const;
  const DBlockConfig& config() const { return config_; }
  const std::optional<SAModule>& sa() const { return sa_; }
  const std::optional<ConvBlock>& plain() const { return plain_; }

 private:
  DBlockConfig config_;
  std::optional<SAModule> sa_;
  std::optional<ConvBlock> plain_;
};

/// Side length of the effective receptive field of level `level`'s dilated
/// 3x3 conv: 2*level + 1.
int64_t receptive_field(int level);

}  // namespace mslae
