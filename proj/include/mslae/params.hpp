#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mslae/ops.hpp"
#include "mslae/tensor.hpp"

namespace mslae {

enum class ParamKind { conv_weight, conv_bias, bn_gamma, bn_beta };

struct ConvLayer {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;

  Tensor forward(const Tensor& x) const { return conv2d(x, spec, weight, bias); }
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  std::shared_ptr<RunningStats> stats;

  Tensor forward(const Tensor& x, Mode mode) const { return batchnorm2d(x, gamma, beta, *stats, mode); }
};

/// Ordered, named registry of trainable tensors and BN running statistics.
///
/// Layers bind through conv()/batchnorm(): the first call under a name creates
/// zero-filled tensors, later calls return the same handles. Registration
/// order is the canonical order for initialization and checkpoints.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    ParamKind kind;
    int64_t fan_in = 0;
    Tensor value;
  };
  struct StatsEntry {
    std::string name;
    std::shared_ptr<RunningStats> stats;
  };

  ConvLayer conv(const std::string& name, const ConvSpec& spec, bool with_bias = true);
  BatchNormLayer batchnorm(const std::string& name, int64_t channels);

  const std::vector<Entry>& entries() const { return entries_; }
  const std::vector<StatsEntry>& stats() const { return stats_; }
  const Entry* find(const std::string& name) const;
  std::shared_ptr<RunningStats> find_stats(const std::string& name) const;

  std::vector<Tensor> trainable() const;
  int64_t count() const;
  // Element count of every entry whose name starts with `prefix`.
  int64_t count(const std::string& prefix) const;

  // Deep copy: values, statistics and registration order; no grads.
  ParameterSet clone() const;
  void zero_grad();
  // Marks every statistics buffer as mean 0 / var 1 and usable in eval mode.
  void reset_running_stats();

 private:
  Tensor bind(const std::string& name, const Shape& shape, ParamKind kind, int64_t fan_in);

  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
  std::vector<StatsEntry> stats_;
  std::map<std::string, size_t> stats_index_;
};

}  // namespace mslae
