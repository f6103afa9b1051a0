#include "mslae/config.hpp"

#include <fstream>
#include <set>
#include <type_traits>

#include "mslae/error.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace mslae {

namespace {

// Reads known keys out of one JSON object and rejects everything else.
class Section {
 public:
  Section(json j, std::string where) : j_(std::move(j)), where_(std::move(where)) {
    if (j_.is_null()) j_ = json::object();
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string path = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0)
        throw ConfigError(path + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
    } else {
      if (!v.is_array()) throw ConfigError(path + ": expected a list");
      for (const json& e : v)
        if (!e.is_number_integer()) throw ConfigError(path + ": expected a list of integers");
    }
    out = v.get<T>();
  }

  template <class E>
  void read_enum(const char* key, E& out, E (*parse)(const std::string&)) {
    std::string text;
    bool present = j_.contains(key);
    read(key, text);
    if (present) out = parse(text);
  }

  Section sub(const char* key) {
    seen_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : json::object(), where_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
  }

 private:
  json j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_network(Section s, NetworkConfig& c) {
  s.read("encoder_channels", c.encoder_channels);
  s.read("bottleneck_channels", c.bottleneck_channels);
  s.read("aggregation_channels", c.aggregation_channels);
  s.read("input_channels", c.input_channels);
  s.read("enable_ddpp", c.enable_ddpp);
  s.read("enable_sa", c.enable_sa);
  s.finish();
}

void read_loss(Section s, LossConfig& c) {
  s.read_enum("kind", c.kind, parse_loss_kind);
  s.read("alpha", c.alpha);
  s.read("beta", c.beta);
  s.read("ei_epsilon", c.ei_epsilon);
  s.finish();
}

}  // namespace

const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::micro: return "micro";
    case Aggregation::macro: return "macro";
    case Aggregation::both: return "both";
  }
  return "?";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "micro") return Aggregation::micro;
  if (text == "macro") return Aggregation::macro;
  if (text == "both") return Aggregation::both;
  throw ConfigError("unknown aggregation '" + text + "' (expected micro, macro or both)");
}

json to_json(const NetworkConfig& c) {
  return {{"encoder_channels", c.encoder_channels},
          {"bottleneck_channels", c.bottleneck_channels},
          {"aggregation_channels", c.aggregation_channels},
          {"input_channels", c.input_channels},
          {"enable_ddpp", c.enable_ddpp},
          {"enable_sa", c.enable_sa}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  read_network(Section(j, "network"), c);
  c.validate();
  return c;
}

json to_json(const LossConfig& c) {
  return {{"kind", to_string(c.kind)}, {"alpha", c.alpha}, {"beta", c.beta}, {"ei_epsilon", c.ei_epsilon}};
}

LossConfig loss_config_from_json(const json& j) {
  LossConfig c;
  read_loss(Section(j, "loss"), c);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  network.validate();
  loss.validate();
  augment.validate();
  train_config().validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (data.holdout < 0) throw ConfigError("data.holdout must be >= 0");
  const SyntheticDataConfig& s = data.synthetic;
  if (s.train_count < 0 || s.eval_count < 0) throw ConfigError("data.synthetic counts must be >= 0");
  if (s.height < 8 || s.width < 8) throw ConfigError("data.synthetic height/width must be >= 8");
  if (!(metrics.threshold > 0.0 && metrics.threshold < 1.0)) throw ConfigError("metrics.threshold must be in (0, 1)");
}

bool RunConfig::operator==(const RunConfig& o) const {
  return seed == o.seed && output_dir == o.output_dir && network == o.network && loss == o.loss &&
         train == o.train && augment == o.augment && data == o.data && metrics == o.metrics;
}

fs::path RunConfig::resolve(const std::string& p) const {
  const fs::path path(p);
  return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).lexically_normal();
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = train.learning_rate;
  t.batch_size = train.batch_size;
  t.epochs = train.epochs;
  t.max_steps = train.max_steps;
  t.adam = train.adam;
  t.loss = loss;
  t.seed = seed;
  t.eval_every = train.eval_every;
  t.checkpoint_dir = output_path() / "checkpoints";
  t.augment = train.augment;
  t.augmentation = augment;
  t.augmentation.seed = seed;
  t.patch = train.patch;
  t.eval = eval_config();
  return t;
}

json to_json(const RunConfig& c) {
  const TrainSection& t = c.train;
  const DataConfig& d = c.data;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"network", to_json(c.network)},
      {"loss", to_json(c.loss)},
      {"train",
       {{"learning_rate", t.learning_rate},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"max_steps", t.max_steps},
        {"eval_every", t.eval_every},
        {"augment", t.augment},
        {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}},
        {"patch", {{"size", t.patch.size}, {"stride", t.patch.stride}}}}},
      {"augment",
       {{"hflip_prob", c.augment.hflip_prob},
        {"vflip_prob", c.augment.vflip_prob},
        {"shift_frac", c.augment.shift_frac}}},
      {"data",
       {{"train_manifest", d.train_manifest},
        {"eval_manifest", d.eval_manifest},
        {"test_manifest", d.test_manifest},
        {"holdout", d.holdout},
        {"normalize", to_string(d.normalize)},
        {"synthetic",
         {{"train_count", d.synthetic.train_count},
          {"eval_count", d.synthetic.eval_count},
          {"height", d.synthetic.height},
          {"width", d.synthetic.width}}}}},
      {"metrics",
       {{"threshold", c.metrics.threshold},
        {"use_fov", c.metrics.use_fov},
        {"aggregation", to_string(c.metrics.aggregation)}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "config");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  read_network(root.sub("network"), c.network);
  read_loss(root.sub("loss"), c.loss);
  {
    Section s = root.sub("train");
    s.read("learning_rate", c.train.learning_rate);
    s.read("batch_size", c.train.batch_size);
    s.read("epochs", c.train.epochs);
    s.read("max_steps", c.train.max_steps);
    s.read("eval_every", c.train.eval_every);
    s.read("augment", c.train.augment);
    Section adam = s.sub("adam");
    adam.read("beta1", c.train.adam.beta1);
    adam.read("beta2", c.train.adam.beta2);
    adam.read("epsilon", c.train.adam.epsilon);
    adam.finish();
    Section patch = s.sub("patch");
    patch.read("size", c.train.patch.size);
    patch.read("stride", c.train.patch.stride);
    patch.finish();
    s.finish();
  }
  {
    Section s = root.sub("augment");
    s.read("hflip_prob", c.augment.hflip_prob);
    s.read("vflip_prob", c.augment.vflip_prob);
    s.read("shift_frac", c.augment.shift_frac);
    s.finish();
  }
  {
    Section s = root.sub("data");
    s.read("train_manifest", c.data.train_manifest);
    s.read("eval_manifest", c.data.eval_manifest);
    s.read("test_manifest", c.data.test_manifest);
    s.read("holdout", c.data.holdout);
    s.read_enum("normalize", c.data.normalize, parse_normalize_mode);
    Section syn = s.sub("synthetic");
    syn.read("train_count", c.data.synthetic.train_count);
    syn.read("eval_count", c.data.synthetic.eval_count);
    syn.read("height", c.data.synthetic.height);
    syn.read("width", c.data.synthetic.width);
    syn.finish();
    s.finish();
  }
  {
    Section s = root.sub("metrics");
    s.read("threshold", c.metrics.threshold);
    s.read("use_fov", c.metrics.use_fov);
    s.read_enum("aggregation", c.metrics.aggregation, parse_aggregation);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.base_dir = path.parent_path();
  return c;
}

void save_run_config(const RunConfig& c, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(c).dump(2) << "\n";
}

}  // namespace mslae
