#include "mslae/params.hpp"

#include "mslae/error.hpp"

namespace mslae {

Tensor ParameterSet::bind(const std::string& name, const Shape& shape, ParamKind kind, int64_t fan_in) {
  if (auto it = index_.find(name); it != index_.end()) {
    const Entry& e = entries_[it->second];
    if (e.value.shape() != shape)
      throw ConfigError("parameter " + name + " registered with shape " + e.value.shape().str() +
                        ", requested " + shape.str());
    return e.value;
  }
  Tensor t = Tensor::zeros(shape, true);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, kind, fan_in, t});
  return t;
}

ConvLayer ParameterSet::conv(const std::string& name, const ConvSpec& spec, bool with_bias) {
  spec.validate();
  ConvLayer layer;
  layer.spec = spec;
  const int64_t fan_in = spec.in_channels * spec.kernel.h * spec.kernel.w;
  layer.weight = bind(name + ".weight", spec.weight_shape(), ParamKind::conv_weight, fan_in);
  if (with_bias) layer.bias = bind(name + ".bias", Shape{spec.out_channels, 1, 1, 1}, ParamKind::conv_bias, fan_in);
  return layer;
}

BatchNormLayer ParameterSet::batchnorm(const std::string& name, int64_t channels) {
  BatchNormLayer layer;
  layer.gamma = bind(name + ".gamma", Shape{channels, 1, 1, 1}, ParamKind::bn_gamma, 0);
  layer.beta = bind(name + ".beta", Shape{channels, 1, 1, 1}, ParamKind::bn_beta, 0);
  if (auto it = stats_index_.find(name); it != stats_index_.end()) {
    layer.stats = stats_[it->second].stats;
  } else {
    layer.stats = std::make_shared<RunningStats>(RunningStats::unrecorded(channels));
    stats_index_.emplace(name, stats_.size());
    stats_.push_back(StatsEntry{name, layer.stats});
    // Fresh gamma starts at one.
    auto g = layer.gamma.mutable_data();
    std::fill(g.begin(), g.end(), 1.0f);
  }
  return layer;
}

const ParameterSet::Entry* ParameterSet::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::shared_ptr<RunningStats> ParameterSet::find_stats(const std::string& name) const {
  auto it = stats_index_.find(name);
  return it == stats_index_.end() ? nullptr : stats_[it->second].stats;
}

std::vector<Tensor> ParameterSet::trainable() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(e.value);
  return out;
}

int64_t ParameterSet::count() const {
  int64_t total = 0;
  for (const Entry& e : entries_) total += e.value.numel();
  return total;
}

int64_t ParameterSet::count(const std::string& prefix) const {
  int64_t total = 0;
  for (const Entry& e : entries_)
    if (e.name.compare(0, prefix.size(), prefix) == 0) total += e.value.numel();
  return total;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet copy;
  copy.index_ = index_;
  copy.stats_index_ = stats_index_;
  for (const Entry& e : entries_) {
    Tensor t = e.value.detach();
    t.set_requires_grad(true);
    copy.entries_.push_back(Entry{e.name, e.kind, e.fan_in, t});
  }
  for (const StatsEntry& s : stats_)
    copy.stats_.push_back(StatsEntry{s.name, std::make_shared<RunningStats>(*s.stats)});
  return copy;
}

void ParameterSet::zero_grad() {
  for (Entry& e : entries_) e.value.zero_grad();
}

void ParameterSet::reset_running_stats() {
  for (StatsEntry& s : stats_) *s.stats = RunningStats::defaults(static_cast<int64_t>(s.stats->mean.size()));
}

}  // namespace mslae
