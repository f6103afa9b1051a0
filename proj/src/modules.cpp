#include "mslae/modules.hpp"

#include "mslae/error.hpp"

namespace mslae {

ConvBnRelu::ConvBnRelu(ParameterSet& params, const std::string& name, int64_t in_channels, int64_t out_channels)
    : conv_(params.conv(name + ".conv", ConvSpec::same(in_channels, out_channels, 3))),
      bn_(params.batchnorm(name + ".bn", out_channels)) {}

Tensor ConvBnRelu::forward(const Tensor& x, Mode mode) const { return relu(bn_.forward(conv_.forward(x), mode)); }

ConvBlock::ConvBlock(ParameterSet& params, const std::string& name, int64_t in_channels, int64_t out_channels)
    : first_(params, name + ".0", in_channels, out_channels), second_(params, name + ".1", out_channels, out_channels) {}

Tensor ConvBlock::forward(const Tensor& x, Mode mode) const { return second_.forward(first_.forward(x, mode), mode); }

DDPPConfig DDPPConfig::for_level(int64_t channels, int level) {
  DDPPConfig c;
  c.channels = channels;
  c.dilation_rate = level;
  c.validate();
  return c;
}

void DDPPConfig::validate() const {
  if (channels <= 0) throw ConfigError("D-DPP: channels must be positive");
  if (dilation_rate < 1 || dilation_rate > kLevels)
    throw ConfigError("D-DPP: dilation rate " + std::to_string(dilation_rate) + " outside levels 1..4");
  if (pool_grids != kPoolGrids) throw ConfigError("D-DPP: pool grids must be exactly [1, 3, 6]");
}

DDPPModule::DDPPModule(ParameterSet& params, const std::string& name, const DDPPConfig& config) : config_(config) {
  config_.validate();
  for (size_t i = 0; i < branches_.size(); ++i)
    branches_[i] = params.conv(name + ".branch" + std::to_string(config_.pool_grids[i]),
                               ConvSpec::same(config_.channels, config_.channels, 3, config_.dilation_rate));
}

Tensor DDPPModule::forward(const Tensor& x) const {
  const Shape& s = x.shape();
  const int64_t largest = config_.pool_grids.back();
  if (s.h < largest || s.w < largest)
    throw ConfigError("D-DPP: feature map " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " is smaller than the " + std::to_string(largest) + "x" + std::to_string(largest) +
                      " pooling grid; pad the input or reduce the pool grid");
  if (s.c != config_.channels)
    throw ConfigError("D-DPP: input has " + std::to_string(s.c) + " channels, module expects " +
                      std::to_string(config_.channels));
  Tensor total;
  for (size_t i = 0; i < branches_.size(); ++i) {
    const int64_t g = config_.pool_grids[i];
    Tensor branch = upsample_bilinear(branches_[i].forward(adaptive_avg_pool2d(x, {g, g})), {s.h, s.w});
    total = total.defined() ? add(total, branch) : branch;
  }
  return add(total, x);
}

void SAConfig::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw ConfigError("SA: channel counts must be positive");
  if (attention_pool != Hw{2, 2}) throw ConfigError("SA: attention pool must be 2x2");
}

SAModule::SAModule(ParameterSet& params, const std::string& name, const SAConfig& config)
    : config_(config),
      main_(params, name + ".main", config.in_channels, config.out_channels),
      attention_(params, name + ".attn", config.in_channels, config.out_channels) {
  config_.validate();
}

SAParts SAModule::forward_parts(const Tensor& x, Mode mode) const {
  const Shape& s = x.shape();
  if (s.c != config_.in_channels)
    throw ConfigError("SA: input has " + std::to_string(s.c) + " channels, module expects " +
                      std::to_string(config_.in_channels));
  SAParts parts;
  parts.residual = main_.forward(x, mode);
  // Odd sizes get one zero row/column so the 2x2 pool tiles exactly.
  Tensor padded = pad_zero(x, s.h % 2, s.w % 2);
  const Hw pooled{padded.shape().h / 2, padded.shape().w / 2};
  Tensor squeezed = attention_.forward(adaptive_avg_pool2d(padded, pooled), mode);
  parts.attention = upsample_bilinear(sigmoid(squeezed), {s.h, s.w});
  if (parts.attention.shape() != parts.residual.shape())
    throw ConfigError("SA: attention path " + parts.attention.shape().str() + " does not match residual path " +
                      parts.residual.shape().str());
  parts.output = combine(parts.attention, parts.residual);
  return parts;
}

Tensor SAModule::combine(const Tensor& attention, const Tensor& residual) {
  return add(mul(attention, residual), attention);
}

void EBlockConfig::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw ConfigError("E-Block: channel counts must be positive");
  if (level < 1 || level > kLevels) throw ConfigError("E-Block: level must be in 1..4");
  if (!enable_ddpp && !enable_sa) throw ConfigError("E-Block: at least one of D-DPP and SA must be enabled");
}

EBlock::EBlock(ParameterSet& params, const std::string& name, const EBlockConfig& config) : config_(config) {
  config_.validate();
  entry_ = ConvBnRelu(params, name + ".entry", config_.in_channels, config_.out_channels);
  if (config_.enable_ddpp)
    ddpp_.emplace(params, name + ".ddpp", DDPPConfig::for_level(config_.out_channels, config_.level));
  if (config_.enable_sa) sa_.emplace(params, name + ".sa", SAConfig{config_.out_channels, config_.out_channels});
}

EBlockOutput EBlock::forward(const Tensor& x, Mode mode) const {
  if (x.shape().c != config_.in_channels)
    throw ConfigError("E-Block level " + std::to_string(config_.level) + ": input has " +
                      std::to_string(x.shape().c) + " channels, expected " + std::to_string(config_.in_channels));
  const Tensor y = entry_.forward(x, mode);
  EBlockOutput o;
  o.ddpp_tap = ddpp_ ? ddpp_->forward(y) : y;
  o.sa_tap = sa_ ? sa_->forward(y, mode) : y;
  o.out = add(o.ddpp_tap, o.sa_tap);
  return o;
}

void DBlockConfig::validate() const {
  if (in_channels <= 0 || skip_channels <= 0 || out_channels <= 0)
    throw ConfigError("D-Block: channel counts must be positive");
}

DBlock::DBlock(ParameterSet& params, const std::string& name, const DBlockConfig& config) : config_(config) {
  config_.validate();
  const int64_t merged = config_.in_channels + config_.skip_channels;
  if (config_.enable_sa)
    sa_.emplace(params, name + ".sa", SAConfig{merged, config_.out_channels});
  else
    plain_.emplace(params, name + ".block", merged, config_.out_channels);
}

DBlockOutput DBlock::forward(const Tensor& x, const Tensor& skip, Mode mode) const {
  const Shape& sx = x.shape();
  const Shape& ss = skip.shape();
  if (sx.c != config_.in_channels || ss.c != config_.skip_channels)
    throw ConfigError("D-Block: channel mismatch, got " + sx.str() + " and skip " + ss.str());
  if (ss.h != 2 * sx.h || ss.w != 2 * sx.w || ss.n != sx.n)
    throw ConfigError("D-Block: skip " + ss.str() + " is not twice the spatial size of " + sx.str());
  Tensor merged = concat_channels(upsample_bilinear(x, {ss.h, ss.w}), skip);
  DBlockOutput o;
  o.out = sa_ ? sa_->forward(merged, mode) : plain_->forward(merged, mode);
  o.sa_tap = o.out;
  return o;
}

int64_t receptive_field(int level) {
  if (level < 1 || level > kLevels) throw ConfigError("receptive_field: level must be in 1..4");
  return ConvSpec::same(1, 1, 3, level).receptive_field().h;
}

}  // namespace mslae
