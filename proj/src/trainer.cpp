#include "mslae/trainer.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "mslae/checkpoint.hpp"
#include "mslae/error.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace mslae {

namespace {

// Network binds to existing entries without registering anything new, so a
// fully built state is never modified here.
Network bind_network(const ModelState& state) { return Network(const_cast<ModelState&>(state)); }

std::vector<NamedTensor> named_params(const ModelState& state) {
  std::vector<NamedTensor> out;
  for (const auto& e : state.params.entries()) out.push_back({e.name, e.value});
  return out;
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(epoch >> 32), 0x9e3779b9u};
  std::mt19937_64 rng(seq);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng() % i)]);
  return order;
}

Tensor stack(const std::vector<const Tensor*>& parts) {
  const Shape& first = parts.front()->shape();
  Shape s = first;
  s.n = 0;
  std::vector<float> data;
  for (const Tensor* t : parts) {
    const Shape& ts = t->shape();
    if (ts.c != first.c || ts.h != first.h || ts.w != first.w)
      throw ConfigError("cannot batch " + first.str() + " with " + ts.str() +
                        "; use patch training for datasets with mixed image sizes");
    s.n += ts.n;
    data.insert(data.end(), t->data().begin(), t->data().end());
  }
  return Tensor::from_data(s, std::move(data));
}

json values_to_json(const MetricValues& v) {
  auto opt = [](const std::optional<double>& x) { return x ? json(*x) : json(nullptr); };
  return {{"se", opt(v.se)}, {"sp", opt(v.sp)}, {"acc", opt(v.acc)}, {"auroc", opt(v.auroc)}};
}

MetricValues values_from_json(const json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  return {opt("se"), opt("sp"), opt("acc"), opt("auroc")};
}

std::string adam_name(char moment, const std::string& param) { return std::string("adam.") + moment + "/" + param; }

CheckpointExtras resume_extras(const ModelState& state, const AdamState& adam, const TrainHistory& h) {
  CheckpointExtras ex;
  ex.meta = {{"kind", "last"}, {"epoch", h.epochs_completed}, {"adam_step", adam.step}, {"history", history_to_json(h)}};
  const auto& entries = state.params.entries();
  for (size_t i = 0; i < entries.size() && i < adam.m.size(); ++i) {
    ex.tensors.emplace_back(adam_name('m', entries[i].name), Tensor::from_data(entries[i].value.shape(), adam.m[i]));
    ex.tensors.emplace_back(adam_name('v', entries[i].name), Tensor::from_data(entries[i].value.shape(), adam.v[i]));
  }
  return ex;
}

TrainResult run(ModelState state, AdamState adam, TrainHistory hist, const TrainData& data, const TrainConfig& cfg,
                const TrainHooks& hooks) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: the training set is empty");
  auto log = [&](const std::string& line) {
    if (hooks.log) hooks.log(line);
  };
  const bool checkpoints = !cfg.checkpoint_dir.empty();
  const fs::path last_path = cfg.checkpoint_dir / "last.ckpt";
  const fs::path best_path = cfg.checkpoint_dir / "best.ckpt";

  Network net(state);
  const std::vector<NamedTensor> params = named_params(state);
  AugmentationConfig aug = cfg.augmentation;
  aug.seed = cfg.seed;
  int64_t step = hist.steps.empty() ? 0 : hist.steps.back().step + 1;

  for (int64_t epoch = hist.epochs_completed; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<Sample> items;
    for (size_t i = 0; i < data.train.size(); ++i) {
      Sample s = data.train[i];
      if (cfg.augment)
        s = augment(s, draw_augmentation(aug, s.size(), static_cast<uint64_t>(epoch), static_cast<uint64_t>(i)));
      if (cfg.patch.size > 0) {
        const int64_t stride = cfg.patch.stride > 0 ? cfg.patch.stride : cfg.patch.size;
        for (SamplePatch& p : extract_patches(s, {cfg.patch.size, cfg.patch.size}, {stride, stride}))
          items.push_back(std::move(p.sample));
      } else {
        items.push_back(std::move(s));
      }
    }
    const std::vector<size_t> order = epoch_order(items.size(), cfg.seed, static_cast<uint64_t>(epoch));

    double epoch_loss = 0.0;
    int64_t epoch_steps = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      std::vector<const Tensor*> images, masks;
      for (size_t k = b; k < std::min(order.size(), b + static_cast<size_t>(cfg.batch_size)); ++k) {
        images.push_back(&items[order[k]].image);
        masks.push_back(&items[order[k]].mask);
      }
      const Tensor x = stack(images);
      const Tensor y = stack(masks);
      if (hooks.before_step) hooks.before_step(step, state);
      float loss_value = 0.0f;
      try {
        state.params.zero_grad();
        const Tensor loss = compute_loss(net.forward(x, Mode::train), y, cfg.loss);
        loss_value = loss.item();
        loss.backward();
        adam_step(params, adam, cfg.learning_rate, cfg.adam);
      } catch (const NumericError& e) {
        std::ostringstream os;
        os << "training aborted at epoch " << epoch + 1 << ", step " << step << ": " << e.what();
        if (checkpoints && fs::exists(last_path)) os << "; last good checkpoint kept at " << last_path.string();
        throw TrainingAborted(os.str());
      }
      hist.steps.push_back({step, epoch + 1, static_cast<double>(loss_value)});
      epoch_loss += loss_value;
      ++epoch_steps;
      ++step;
    }
    hist.epochs_completed = epoch + 1;
    hist.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    std::ostringstream line;
    line << "epoch " << epoch + 1 << "/" << cfg.epochs << " steps " << epoch_steps << " mean loss "
         << (epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0);

    const bool last_epoch = epoch + 1 == cfg.epochs || (cfg.max_steps > 0 && step >= cfg.max_steps);
    if (!data.eval.empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch)) {
      const DatasetReport report = evaluate(state, data.eval, cfg.eval);
      hist.evals.push_back({epoch + 1, step, report.micro, report.macro});
      const double acc = report.micro.acc.value_or(-1.0);
      line << " eval acc " << acc;
      if (acc > hist.best_accuracy) {
        hist.best_accuracy = acc;
        hist.best_epoch = epoch + 1;
        if (checkpoints) {
          CheckpointExtras ex;
          ex.meta = {{"kind", "best"}, {"epoch", epoch + 1}, {"eval_accuracy", acc}};
          save_checkpoint(state, best_path, &ex);
        }
      }
    }
    if (checkpoints) {
      const CheckpointExtras ex = resume_extras(state, adam, hist);
      save_checkpoint(state, last_path, &ex);
    }
    log(line.str());
  }
  return {std::move(state), std::move(hist)};
}

}  // namespace

void AdamConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be > 0");
}

void adam_step(std::span<const NamedTensor> params, AdamState& state, double lr, const AdamConfig& cfg) {
  if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be > 0");
  if (state.m.empty() && state.step == 0) {
    for (const NamedTensor& p : params) {
      state.m.emplace_back(static_cast<size_t>(p.value.numel()), 0.0f);
      state.v.emplace_back(static_cast<size_t>(p.value.numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ConfigError("adam: optimizer state does not match the parameter list");
  for (size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != static_cast<size_t>(params[i].value.numel()))
      throw ConfigError("adam: moment size mismatch for '" + params[i].name + "'");
    if (!params[i].value.has_grad()) continue;
    auto g = params[i].value.grad();
    for (size_t k = 0; k < g.size(); ++k)
      if (!std::isfinite(g[k])) {
        std::ostringstream os;
        os << "non-finite gradient " << g[k] << " in parameter '" << params[i].name << "' at element " << k;
        throw NumericError(os.str());
      }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor w = params[i].value;
    const bool has = w.has_grad();
    auto g = has ? w.grad() : std::span<const float>{};
    auto wd = w.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t k = 0; k < wd.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.epsilon);
      wd[k] = static_cast<float>(wd[k] - update);
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (patch.size < 0 || patch.stride < 0) throw ConfigError("train: patch size and stride must be >= 0");
  if (patch.size > 0 && patch.size < 16) throw ConfigError("train: patch size must be 0 (full image) or >= 16");
  if (!(eval.threshold > 0.0 && eval.threshold < 1.0)) throw ConfigError("eval threshold must be in (0, 1)");
  adam.validate();
  loss.validate();
  augmentation.validate();
}

json history_to_json(const TrainHistory& h) {
  json steps = json::array();
  for (const StepRecord& s : h.steps) steps.push_back({{"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss}});
  json evals = json::array();
  for (const EvalSnapshot& e : h.evals)
    evals.push_back(
        {{"epoch", e.epoch}, {"step", e.step}, {"micro", values_to_json(e.micro)}, {"macro", values_to_json(e.macro)}});
  return {{"epochs_completed", h.epochs_completed},
          {"best_epoch", h.best_epoch},
          {"best_accuracy", h.best_accuracy},
          {"steps", steps},
          {"evals", evals}};
}

TrainHistory history_from_json(const json& j) {
  TrainHistory h;
  try {
    h.epochs_completed = j.at("epochs_completed").get<int64_t>();
    h.best_epoch = j.at("best_epoch").get<int64_t>();
    h.best_accuracy = j.at("best_accuracy").get<double>();
    for (const json& s : j.at("steps"))
      h.steps.push_back({s.at("step").get<int64_t>(), s.at("epoch").get<int64_t>(), s.at("loss").get<double>()});
    for (const json& e : j.at("evals"))
      h.evals.push_back({e.at("epoch").get<int64_t>(), e.at("step").get<int64_t>(), values_from_json(e.at("micro")),
                         values_from_json(e.at("macro"))});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training history: ") + e.what());
  }
  return h;
}

json timing_to_json(const TrainHistory& h) {
  double total = 0.0;
  for (double s : h.epoch_seconds) total += s;
  return {{"epoch_seconds", h.epoch_seconds}, {"total_seconds", total}};
}

TrainResult train(ModelState init, const TrainData& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.epochs == 0) return {std::move(init), TrainHistory{}};
  return run(std::move(init), AdamState{}, TrainHistory{}, data, cfg, hooks);
}

TrainResult resume_training(const fs::path& checkpoint, const TrainData& data, const TrainConfig& cfg,
                            const TrainHooks& hooks) {
  CheckpointExtras ex;
  ModelState state = load_checkpoint(checkpoint, &ex);
  if (!ex.meta.contains("history") || ex.meta.value("kind", "") != "last")
    throw ConfigError(checkpoint.string() + " has no optimizer state; resume needs a last.ckpt");
  TrainHistory hist = history_from_json(ex.meta.at("history"));
  AdamState adam;
  adam.step = ex.meta.at("adam_step").get<int64_t>();
  std::map<std::string, Tensor> moments(ex.tensors.begin(), ex.tensors.end());
  for (const auto& e : state.params.entries()) {
    auto m = moments.find(adam_name('m', e.name));
    auto v = moments.find(adam_name('v', e.name));
    if (m == moments.end() || v == moments.end())
      throw CheckpointError(CheckpointErrorKind::malformed, "optimizer moments missing for '" + e.name + "'");
    adam.m.emplace_back(m->second.data().begin(), m->second.data().end());
    adam.v.emplace_back(v->second.data().begin(), v->second.data().end());
  }
  return run(std::move(state), std::move(adam), std::move(hist), data, cfg, hooks);
}

Tensor predict(const ModelState& state, const Tensor& image) {
  NoGradGuard guard;
  return bind_network(state).forward(image, Mode::eval);
}

std::vector<uint8_t> to_binary(const Tensor& t) {
  std::vector<uint8_t> out(static_cast<size_t>(t.numel()));
  auto d = t.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = d[i] >= 0.5f ? 1 : 0;
  return out;
}

DatasetReport evaluate_predictions(const std::vector<Sample>& dataset, const std::vector<Tensor>& probabilities,
                                   const EvalConfig& cfg) {
  if (dataset.empty()) throw ConfigError("evaluate: the dataset is empty");
  if (probabilities.size() != dataset.size()) throw ConfigError("evaluate: one prediction per sample is required");
  MetricAccumulator acc(cfg.threshold);
  for (size_t i = 0; i < dataset.size(); ++i) {
    const Sample& s = dataset[i];
    const Tensor& p = probabilities[i];
    if (p.shape().h != s.size().h || p.shape().w != s.size().w || p.shape().c != 1 || p.shape().n != 1)
      throw ConfigError("evaluate: prediction for '" + s.id + "' is " + p.shape().str() + ", mask is " +
                        s.mask.shape().str());
    const std::vector<uint8_t> gt = to_binary(s.mask);
    std::vector<uint8_t> fov;
    if (cfg.use_fov && s.fov) fov = to_binary(*s.fov);
    acc.add(s.id, p.data(), gt, fov);
  }
  return acc.report();
}

DatasetReport evaluate(const ModelState& state, const std::vector<Sample>& dataset, const EvalConfig& cfg,
                       std::vector<Tensor>* probabilities) {
  if (dataset.empty()) throw ConfigError("evaluate: the dataset is empty");
  std::vector<Tensor> probs;
  for (const Sample& s : dataset) probs.push_back(predict(state, s.image));
  DatasetReport r = evaluate_predictions(dataset, probs, cfg);
  if (probabilities) *probabilities = std::move(probs);
  return r;
}

}  // namespace mslae
