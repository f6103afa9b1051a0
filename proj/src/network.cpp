#include "mslae/network.hpp"

#include <cmath>
#include <random>

#include "mslae/error.hpp"

namespace mslae {

namespace {

std::string level_name(const char* stage, int level) { return std::string(stage) + std::to_string(level); }

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

std::vector<int64_t> NetworkConfig::decoder_channels() const {
  return std::vector<int64_t>(encoder_channels.rbegin(), encoder_channels.rend());
}

void NetworkConfig::validate() const {
  if (encoder_channels.size() != static_cast<size_t>(kLevels))
    throw ConfigError("network: exactly 4 encoder levels required, got " + std::to_string(encoder_channels.size()));
  for (int64_t c : encoder_channels)
    if (c <= 0) throw ConfigError("network: encoder channel counts must be positive");
  if (bottleneck_channels <= 0) throw ConfigError("network: bottleneck_channels must be positive");
  if (aggregation_channels <= 0) throw ConfigError("network: aggregation_channels must be positive");
  if (input_channels <= 0) throw ConfigError("network: input_channels must be positive");
  if (!enable_ddpp && !enable_sa) throw ConfigError("network: at least one of enable_ddpp and enable_sa must be true");
}

ModelState ModelState::clone() const { return ModelState{config, seed, params.clone()}; }

ModelState build_state(const NetworkConfig& config) {
  config.validate();
  ModelState state;
  state.config = config;
  Network net(state);
  (void)net;
  return state;
}

ModelState init_he_normal(const NetworkConfig& config, uint64_t seed) {
  ModelState state = build_state(config);
  state.seed = seed;
  std::mt19937_64 rng(seed);
  for (const ParameterSet::Entry& e : state.params.entries()) {
    Tensor t = e.value;
    auto d = t.mutable_data();
    switch (e.kind) {
      case ParamKind::conv_weight: {
        std::normal_distribution<float> normal(0.0f, std::sqrt(2.0f / static_cast<float>(e.fan_in)));
        for (float& v : d) v = normal(rng);
        break;
      }
      case ParamKind::conv_bias:
      case ParamKind::bn_beta: std::fill(d.begin(), d.end(), 0.0f); break;
      case ParamKind::bn_gamma: std::fill(d.begin(), d.end(), 1.0f); break;
    }
  }
  return state;
}

int64_t param_count(const ModelState& state) { return state.params.count(); }

ParamBreakdown param_breakdown(const ModelState& state) {
  ParamBreakdown b;
  b.total = state.params.count();
  std::vector<std::string> prefixes;
  for (int i = 1; i <= kLevels; ++i) prefixes.push_back(level_name("enc", i));
  prefixes.push_back("bottleneck");
  for (int i = kLevels; i >= 1; --i) prefixes.push_back(level_name("dec", i));
  for (const char* p : {"enc_agg", "dec_agg", "fusion", "dec_proj", "head"}) prefixes.push_back(p);
  for (const std::string& p : prefixes) b.modules.emplace_back(p, state.params.count(p + "."));
  return b;
}

Aggregator::Aggregator(ParameterSet& params, const std::string& name, const std::vector<int64_t>& tap_channels,
                       int64_t out_channels) {
  for (size_t i = 0; i < tap_channels.size(); ++i)
    projections_.push_back(params.conv(name + ".proj" + std::to_string(i), ConvSpec::same(tap_channels[i], out_channels, 1)));
}

Tensor Aggregator::forward(const std::vector<Tensor>& taps, Hw target) const {
  if (taps.size() != projections_.size())
    throw ConfigError("aggregation: expected " + std::to_string(projections_.size()) + " taps, got " +
                      std::to_string(taps.size()));
  Tensor total;
  for (size_t i = 0; i < taps.size(); ++i) {
    if (!taps[i].defined()) throw ConfigError("aggregation: tap " + std::to_string(i) + " is missing");
    Tensor p = projections_[i].forward(taps[i]);
    if (p.shape().h != target.h || p.shape().w != target.w) p = upsample_bilinear(p, target);
    total = total.defined() ? add(total, p) : p;
  }
  return total;
}

Network::Network(ModelState& state) : config_(state.config) {
  config_.validate();
  ParameterSet& params = state.params;
  const auto& enc = config_.encoder_channels;
  int64_t in = config_.input_channels;
  for (int level = 1; level <= kLevels; ++level) {
    EBlockConfig c{in, enc[static_cast<size_t>(level - 1)], level, config_.enable_ddpp, config_.enable_sa};
    encoder_.emplace_back(params, level_name("enc", level), c);
    in = c.out_channels;
  }
  bottleneck_ = ConvBlock(params, "bottleneck", in, config_.bottleneck_channels);
  int64_t below = config_.bottleneck_channels;
  for (int level = kLevels; level >= 1; --level) {
    const int64_t ch = enc[static_cast<size_t>(level - 1)];
    DBlockConfig c{below, ch, ch, config_.enable_ddpp, config_.enable_sa};
    decoder_.emplace_back(params, level_name("dec", level), c);
    below = ch;
  }
  std::vector<int64_t> enc_taps;
  for (int64_t ch : enc) {
    enc_taps.push_back(ch);  // D-DPP tap
    enc_taps.push_back(ch);  // SA tap
  }
  enc_agg_ = Aggregator(params, "enc_agg", enc_taps, config_.aggregation_channels);
  dec_agg_ = Aggregator(params, "dec_agg", config_.decoder_channels(), config_.aggregation_channels);
  const int64_t agg = config_.aggregation_channels;
  fusion_ = params.conv("fusion", ConvSpec::same(agg, agg, 3));
  dec_proj_ = params.conv("dec_proj", ConvSpec::same(enc.front(), agg, 1));
  head_ = params.conv("head", ConvSpec::same(agg, 1, 1));
}

Hw Network::padded_size(Hw input) {
  // Four 2x2 pools, and the level-4 map must hold the 6x6 pooling grid.
  constexpr int64_t multiple = 16;
  constexpr int64_t minimum = 8 * 6;
  return Hw{std::max(minimum, round_up(input.h, multiple)), std::max(minimum, round_up(input.w, multiple))};
}

Tensor Network::aggregate_encoder(const std::vector<EBlockOutput>& taps, Hw target) const {
  if (taps.size() != static_cast<size_t>(kLevels))
    throw ConfigError("aggregate_encoder: expected 4 levels of taps, got " + std::to_string(taps.size()));
  std::vector<Tensor> flat;
  for (const EBlockOutput& t : taps) {
    flat.push_back(t.ddpp_tap);
    flat.push_back(t.sa_tap);
  }
  return enc_agg_.forward(flat, target);
}

Tensor Network::aggregate_decoder(const std::vector<DBlockOutput>& taps, Hw target) const {
  if (taps.size() != static_cast<size_t>(kLevels))
    throw ConfigError("aggregate_decoder: expected 4 levels of taps, got " + std::to_string(taps.size()));
  std::vector<Tensor> flat;
  for (const DBlockOutput& t : taps) flat.push_back(t.sa_tap);
  return dec_agg_.forward(flat, target);
}

ForwardTrace Network::trace(const Tensor& x, Mode mode, bool pad) const {
  const Shape& s = x.shape();
  if (s.c != config_.input_channels)
    throw ConfigError("network: input has " + std::to_string(s.c) + " channels, expected " +
                      std::to_string(config_.input_channels));
  ForwardTrace t;
  t.input_size = {s.h, s.w};
  Tensor cur = x;
  if (pad) {
    t.padded_size = padded_size(t.input_size);
    cur = pad_zero(x, t.padded_size.h - s.h, t.padded_size.w - s.w);
  } else {
    if (s.h % 16 != 0 || s.w % 16 != 0 || s.h < 48 || s.w < 48)
      throw ConfigError("network: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                        " must be a multiple of 16 and at least 48 when padding is disabled");
    t.padded_size = t.input_size;
  }

  for (const EBlock& block : encoder_) {
    t.encoder.push_back(block.forward(cur, mode));
    cur = maxpool2d(t.encoder.back().out);
  }
  t.bottleneck = bottleneck_.forward(cur, mode);
  cur = t.bottleneck;
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const Tensor& skip = t.encoder[encoder_.size() - 1 - i].out;
    t.decoder.push_back(decoder_[i].forward(cur, skip, mode));
    cur = t.decoder.back().out;
  }
  t.encoder_aggregate = aggregate_encoder(t.encoder, t.padded_size);
  t.decoder_aggregate = aggregate_decoder(t.decoder, t.padded_size);
  t.fused = add(dec_proj_.forward(cur), fusion_.forward(add(t.encoder_aggregate, t.decoder_aggregate)));
  t.probabilities = crop(sigmoid(head_.forward(t.fused)), t.input_size);
  return t;
}

std::vector<LevelSummary> describe(const ModelState& state, Hw input) {
  const NetworkConfig& c = state.config;
  const Hw padded = Network::padded_size(input);
  std::vector<LevelSummary> rows;
  for (int level = 1; level <= kLevels; ++level) {
    LevelSummary r;
    r.stage = "encoder";
    r.level = level;
    r.channels = c.encoder_channels[static_cast<size_t>(level - 1)];
    const int64_t f = int64_t{1} << (level - 1);
    r.spatial = {padded.h / f, padded.w / f};
    r.ddpp = c.enable_ddpp;
    r.sa = c.enable_sa;
    if (r.ddpp) {
      r.dilation = DDPPConfig::for_level(r.channels, level).dilation_rate;
      r.receptive_field = receptive_field(level);
    }
    r.params = state.params.count(level_name("enc", level) + ".");
    rows.push_back(r);
  }
  LevelSummary b;
  b.stage = "bottleneck";
  b.level = kLevels + 1;
  b.channels = c.bottleneck_channels;
  b.spatial = {padded.h / 16, padded.w / 16};
  b.params = state.params.count("bottleneck.");
  rows.push_back(b);
  for (int level = kLevels; level >= 1; --level) {
    LevelSummary r;
    r.stage = "decoder";
    r.level = level;
    r.channels = c.encoder_channels[static_cast<size_t>(level - 1)];
    const int64_t f = int64_t{1} << (level - 1);
    r.spatial = {padded.h / f, padded.w / f};
    r.sa = c.enable_sa;
    r.params = state.params.count(level_name("dec", level) + ".");
    rows.push_back(r);
  }
  return rows;
}

}  // namespace mslae
