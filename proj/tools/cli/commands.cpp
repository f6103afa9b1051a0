#include "cli/commands.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mslae/checkpoint.hpp"
#include "mslae/error.hpp"
#include "mslae/image_io.hpp"

namespace mslae::cli {

using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json values_json(const MetricValues& v) {
  return {{"se", opt_json(v.se)}, {"sp", opt_json(v.sp)}, {"acc", opt_json(v.acc)}, {"auroc", opt_json(v.auroc)}};
}

std::string opt_text(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << *v;
  return os.str();
}

std::vector<Sample> synthetic_set(const RunConfig& c, int64_t count, uint64_t stream, const char* prefix) {
  std::vector<Sample> out;
  const Hw size{c.data.synthetic.height, c.data.synthetic.width};
  for (int64_t i = 0; i < count; ++i) {
    std::ostringstream id;
    id << prefix << std::setw(3) << std::setfill('0') << i;
    out.push_back(synthetic_vessel_sample(size, c.seed * 1000003 + stream * 10007 + static_cast<uint64_t>(i), id.str()));
  }
  return out;
}

std::vector<Sample> load_manifest_set(const RunConfig& c, const std::string& path, const char* role) {
  const fs::path p = c.resolve(path);
  if (!fs::exists(p)) throw ConfigError(std::string(role) + " manifest not found: " + p.string());
  return load_dataset(read_manifest(p));
}

std::vector<Sample> normalized(std::vector<Sample> set, NormalizeMode mode, std::vector<std::string>* warnings) {
  for (Sample& s : set) s = normalize(s, mode, warnings);
  return set;
}

std::string hw_text(Hw s) { return std::to_string(s.h) + "x" + std::to_string(s.w); }

void check_kind_exit(const CheckpointError& e, int& code) {
  switch (e.kind()) {
    case CheckpointErrorKind::shape_mismatch:
    case CheckpointErrorKind::unknown_tensor:
    case CheckpointErrorKind::version_mismatch: code = kConfigError; break;
    default: code = kRuntimeError;
  }
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (const auto* ce = dynamic_cast<const CheckpointError*>(&e)) {
    int code = kRuntimeError;
    check_kind_exit(*ce, code);
    return code;
  }
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  return kRuntimeError;
}

// ---- data ---------------------------------------------------------------------

TrainData load_train_data(const RunConfig& c, std::vector<std::string>* warnings) {
  c.validate();
  TrainData d;
  const bool from_manifest = !c.data.train_manifest.empty();
  d.train = from_manifest ? load_manifest_set(c, c.data.train_manifest, "train")
                          : synthetic_set(c, c.data.synthetic.train_count, 0, "synthetic-train-");
  if (!c.data.eval_manifest.empty()) {
    d.eval = load_manifest_set(c, c.data.eval_manifest, "eval");
  } else if (c.data.synthetic.eval_count > 0) {
    d.eval = synthetic_set(c, c.data.synthetic.eval_count, 1, "synthetic-eval-");
  } else if (from_manifest && c.data.holdout > 0) {
    if (static_cast<int64_t>(d.train.size()) <= c.data.holdout)
      throw ConfigError("data.holdout (" + std::to_string(c.data.holdout) + ") leaves no training images out of " +
                        std::to_string(d.train.size()));
    const auto split = d.train.end() - c.data.holdout;
    d.eval.assign(split, d.train.end());
    d.train.erase(split, d.train.end());
  }
  d.train = normalized(std::move(d.train), c.data.normalize, warnings);
  d.eval = normalized(std::move(d.eval), c.data.normalize, warnings);
  return d;
}

std::vector<Sample> load_eval_data(const RunConfig& c, std::vector<std::string>* warnings) {
  if (!c.data.test_manifest.empty())
    return normalized(load_manifest_set(c, c.data.test_manifest, "test"), c.data.normalize, warnings);
  return load_train_data(c, warnings).eval;
}

// ---- reports --------------------------------------------------------------------

json report_to_json(const DatasetReport& r, const EvalConfig& eval, Aggregation aggregation) {
  json images = json::array();
  for (const ImageMetrics& m : r.images) {
    json row = values_json(m.values);
    row["id"] = m.id;
    row["tp"] = m.counts.tp;
    row["fp"] = m.counts.fp;
    row["tn"] = m.counts.tn;
    row["fn"] = m.counts.fn;
    images.push_back(row);
  }
  json j = {{"threshold", eval.threshold},
            {"use_fov", eval.use_fov},
            {"aggregation", to_string(aggregation)},
            {"images", images},
            {"pooled", {{"tp", r.pooled.tp}, {"fp", r.pooled.fp}, {"tn", r.pooled.tn}, {"fn", r.pooled.fn}}}};
  if (aggregation != Aggregation::macro) j["micro"] = values_json(r.micro);
  if (aggregation != Aggregation::micro) j["macro"] = values_json(r.macro);
  return j;
}

namespace {

std::vector<std::vector<std::string>> report_rows(const DatasetReport& r, Aggregation aggregation) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"id", "tp", "fp", "tn", "fn", "se", "sp", "acc", "auroc"});
  auto values = [](std::vector<std::string> row, const MetricValues& v) {
    for (const auto& x : {v.se, v.sp, v.acc, v.auroc}) row.push_back(opt_text(x));
    return row;
  };
  auto counts = [](const std::string& id, const ConfusionCounts& c) {
    return std::vector<std::string>{id, std::to_string(c.tp), std::to_string(c.fp), std::to_string(c.tn),
                                    std::to_string(c.fn)};
  };
  for (const ImageMetrics& m : r.images) rows.push_back(values(counts(m.id, m.counts), m.values));
  if (aggregation != Aggregation::macro) rows.push_back(values(counts("micro", r.pooled), r.micro));
  if (aggregation != Aggregation::micro) rows.push_back(values({"macro", "", "", "", ""}, r.macro));
  return rows;
}

}  // namespace

void write_report_tsv(const DatasetReport& r, Aggregation aggregation, const fs::path& path) {
  std::ostringstream os;
  for (const auto& row : report_rows(r, aggregation)) {
    for (size_t i = 0; i < row.size(); ++i) os << (i ? "\t" : "") << row[i];
    os << "\n";
  }
  write_text(path, os.str());
}

void print_report(std::ostream& out, const DatasetReport& r, Aggregation aggregation) {
  const auto rows = report_rows(r, aggregation);
  std::vector<size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i)
      out << (i ? "  " : "") << (i ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << row[i];
    out << "\n";
  }
  out << std::left;
}

// ---- inspect --------------------------------------------------------------------

InspectReport inspect_model(const NetworkConfig& config, Hw input, bool forward) {
  InspectReport r;
  r.config = config;
  r.input = input;
  r.padded = Network::padded_size(input);
  ModelState state = init_he_normal(config, 0);
  r.levels = describe(state, input);
  r.params = param_breakdown(state);
  if (forward) {
    state.params.reset_running_stats();
    Network net(state);
    NoGradGuard ng;
    const Tensor x = Tensor::full({1, config.input_channels, input.h, input.w}, 0.5f);
    const Tensor y = net.forward(x, Mode::eval);
    r.measured_output = Hw{y.shape().h, y.shape().w};
  }
  return r;
}

void print_inspect(std::ostream& out, const InspectReport& r) {
  const NetworkConfig& c = r.config;
  auto on = [](bool b) { return b ? "enabled" : "disabled"; };
  out << "D-DPP " << on(c.enable_ddpp) << ", SA " << on(c.enable_sa) << ", aggregation width "
      << c.aggregation_channels << "\n";
  out << "input " << hw_text(r.input) << ", padded to " << hw_text(r.padded) << " (bottom/right zeros, cropped back)\n\n";

  std::vector<std::vector<std::string>> rows;
  rows.push_back({"stage", "level", "channels", "shape", "dilation", "rec.field", "D-DPP", "SA", "params"});
  for (const LevelSummary& l : r.levels) {
    const bool has_ddpp_column = l.stage == "encoder";
    const bool has_sa_column = l.stage != "bottleneck";
    rows.push_back({l.stage, std::to_string(l.level), std::to_string(l.channels), hw_text(l.spatial),
                    l.dilation ? std::to_string(l.dilation) : "-",
                    l.receptive_field ? std::to_string(l.receptive_field) + "x" + std::to_string(l.receptive_field) : "-",
                    has_ddpp_column ? on(l.ddpp) : "-", has_sa_column ? on(l.sa) : "-", std::to_string(l.params)});
  }
  std::vector<size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  for (const auto& row : rows) {
    for (size_t i = 0; i + 1 < row.size(); ++i) out << std::left << std::setw(static_cast<int>(width[i] + 2)) << row[i];
    out << std::right << std::setw(static_cast<int>(width.back())) << row.back() << "\n";
  }
  out << "\n";
  for (const auto& [name, count] : r.params.modules)
    if (name.find('_') != std::string::npos || name == "fusion" || name == "head")
      out << std::left << std::setw(12) << name << std::right << std::setw(12) << count << "\n";
  out << std::left << std::setw(12) << "total" << std::right << std::setw(12) << r.params.total << "\n";
  if (r.measured_output)
    out << "\nforward: " << hw_text(r.input) << " in, " << hw_text(*r.measured_output) << " out"
        << (*r.measured_output == r.input ? " (matches input)" : " (MISMATCH)") << "\n";
  out << std::left;
}

// ---- commands ---------------------------------------------------------------------

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(o.config);
    if (cfg.data.train_manifest.empty() && cfg.data.synthetic.train_count == 0)
      throw ConfigError("train: set data.train_manifest or data.synthetic.train_count");
    std::vector<std::string> warnings;
    const TrainData data = load_train_data(cfg, &warnings);
    for (const std::string& w : warnings) err << "warning: " << w << "\n";

    const fs::path dir = cfg.output_path();
    const fs::path ckpt = dir / "checkpoints";
    fs::create_directories(ckpt);
    // The copy lives elsewhere, so its paths must not depend on where it is read from.
    RunConfig saved = cfg;
    saved.output_dir = fs::absolute(cfg.output_path()).lexically_normal().string();
    for (std::string* m : {&saved.data.train_manifest, &saved.data.eval_manifest, &saved.data.test_manifest})
      if (!m->empty()) *m = fs::absolute(cfg.resolve(*m)).lexically_normal().string();
    save_run_config(saved, dir / "config.json");

    TrainConfig tc = cfg.train_config();
    tc.checkpoint_dir = ckpt;
    TrainHooks hooks;
    hooks.log = [&out](const std::string& line) { out << line << "\n" << std::flush; };

    out << "training on " << data.train.size() << " images, validating on " << data.eval.size() << ", "
        << param_count(build_state(cfg.network)) << " parameters\n";
    TrainResult result;
    try {
      if (o.resume) {
        result = resume_training(ckpt / "last.ckpt", data, tc, hooks);
      } else {
        for (const char* stale : {"last.ckpt", "best.ckpt", "final.ckpt"}) fs::remove(ckpt / stale);
        result = train(init_he_normal(cfg.network, cfg.seed), data, tc, hooks);
      }
    } catch (const TrainingAborted& e) {
      err << "error: " << e.what() << "\n";
      return static_cast<int>(kRuntimeError);
    }
    CheckpointExtras ex;
    ex.meta = {{"kind", "final"}, {"epoch", result.history.epochs_completed}};
    save_checkpoint(result.state, ckpt / "final.ckpt", &ex);
    write_json(dir / "history.json", history_to_json(result.history));
    write_json(dir / "timing.json", timing_to_json(result.history));

    if (!data.eval.empty()) {
      const EvalConfig ec = cfg.eval_config();
      const DatasetReport report = evaluate(result.state, data.eval, ec);
      write_json(dir / "report.json", report_to_json(report, ec, cfg.metrics.aggregation));
      write_report_tsv(report, cfg.metrics.aggregation, dir / "report.tsv");
      print_report(out, report, cfg.metrics.aggregation);
    }
    out << "outputs in " << dir.string() << "\n";
    return static_cast<int>(kOk);
  });
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.checkpoint.empty() == o.predictions.empty())
      throw ConfigError("eval: give exactly one of --checkpoint or --predictions");
    RunConfig cfg = load_run_config(o.config);
    if (o.use_fov) cfg.metrics.use_fov = *o.use_fov;
    if (o.threshold) cfg.metrics.threshold = *o.threshold;
    const EvalConfig ec = cfg.eval_config();
    if (!(ec.threshold > 0.0 && ec.threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");

    std::vector<std::string> warnings;
    const std::vector<Sample> dataset = load_eval_data(cfg, &warnings);
    for (const std::string& w : warnings) err << "warning: " << w << "\n";
    if (dataset.empty()) throw ConfigError("eval: the configuration yields no evaluation images");

    DatasetReport report;
    if (!o.checkpoint.empty()) {
      if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint not found: " + o.checkpoint.string());
      const ModelState state = load_checkpoint(o.checkpoint, cfg.network);
      report = evaluate(state, dataset, ec);
    } else {
      std::vector<Tensor> probs;
      for (const Sample& s : dataset) {
        const fs::path p = o.predictions / (s.id + "_prob.png");
        Tensor t = read_image(p, 1);
        if (t.shape().h != s.size().h || t.shape().w != s.size().w)
          throw ConfigError(p.string() + " is " + hw_text({t.shape().h, t.shape().w}) + ", expected " +
                            hw_text(s.size()));
        probs.push_back(t);
      }
      report = evaluate_predictions(dataset, probs, ec);
    }
    const fs::path dir = o.out_dir.empty() ? cfg.output_path() / "eval" : o.out_dir;
    write_json(dir / "report.json", report_to_json(report, ec, cfg.metrics.aggregation));
    write_report_tsv(report, cfg.metrics.aggregation, dir / "report.tsv");
    out << "threshold " << ec.threshold << ", FOV " << (ec.use_fov ? "on" : "off") << "\n";
    print_report(out, report, cfg.metrics.aggregation);
    out << "report written to " << (dir / "report.tsv").string() << " and " << (dir / "report.json").string() << "\n";
    return static_cast<int>(kOk);
  });
}

int cmd_predict(const PredictOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg;
    if (o.config) cfg = load_run_config(*o.config);
    if (o.threshold) cfg.metrics.threshold = *o.threshold;
    const double threshold = cfg.metrics.threshold;
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
    if (!o.fovs.empty() && o.fovs.size() != o.images.size())
      throw ConfigError("predict: " + std::to_string(o.fovs.size()) + " FOV masks for " +
                        std::to_string(o.images.size()) + " images");
    std::vector<std::pair<fs::path, std::optional<fs::path>>> jobs;
    for (size_t i = 0; i < o.images.size(); ++i)
      jobs.emplace_back(o.images[i], o.fovs.empty() ? std::nullopt : std::optional<fs::path>(o.fovs[i]));
    if (!o.manifest.empty()) {
      const DatasetManifest m = read_manifest(o.manifest);
      auto at = [&m](const fs::path& p) { return p.is_absolute() ? p : m.base_dir / p; };
      for (const ManifestEntry& e : m.entries)
        jobs.emplace_back(at(e.image), e.fov ? std::optional<fs::path>(at(*e.fov)) : std::nullopt);
    }
    if (jobs.empty()) throw ConfigError("predict: no input images");
    if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint not found: " + o.checkpoint.string());
    const ModelState state =
        o.config ? load_checkpoint(o.checkpoint, cfg.network) : load_checkpoint(o.checkpoint);
    const fs::path dir = o.out_dir.empty() ? cfg.output_path() / "predictions" : o.out_dir;
    fs::create_directories(dir);

    int failed = 0;
    for (const auto& [path, fov] : jobs) {
      try {
        Sample s;
        s.id = path.stem().string();
        s.image = read_image(path, state.config.input_channels);
        if (fov) {
          s.fov = binarize_mask(read_image(*fov, 1));
          if (s.fov->shape().h != s.image.shape().h || s.fov->shape().w != s.image.shape().w)
            throw ConfigError("FOV " + fov->string() + " does not match the image size");
        }
        s = normalize(s, cfg.data.normalize);
        const Tensor prob = predict(state, s.image);
        // The mask is derived from the stored 16-bit values so that it can be
        // recomputed exactly from the probability file.
        const std::vector<uint16_t> q = quantize_probabilities(prob.data());
        std::vector<float> stored(q.size());
        for (size_t i = 0; i < q.size(); ++i) stored[i] = static_cast<float>(q[i] / 65535.0);
        const std::vector<uint8_t> mask = binarize(stored, threshold);
        const fs::path prob_path = dir / (s.id + "_prob.png"), mask_path = dir / (s.id + "_mask.png");
        write_probability_png(prob_path, prob);
        write_mask_png(mask_path, mask, prob.shape().h, prob.shape().w);
        out << path.string() << " -> " << prob_path.string() << ", " << mask_path.string() << "\n";
      } catch (const std::exception& e) {
        ++failed;
        err << "error: " << path.string() << ": " << e.what() << "\n";
      }
    }
    if (failed) err << failed << " of " << jobs.size() << " images failed\n";
    return static_cast<int>(failed ? kRuntimeError : kOk);
  });
}

int cmd_verify(const SuiteOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = std::chrono::steady_clock::now();
    if (o.fault != testing::GradFault::none) out << "gradient fault injected; the gradient checks must fail\n";
    const std::vector<CheckResult> results = run_verify_suite(o, out);
    size_t passed = 0;
    for (const CheckResult& r : results) passed += r.passed;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << passed << "/" << results.size() << " checks passed in " << std::fixed << std::setprecision(1) << secs
        << "s\n";
    return static_cast<int>(passed == results.size() ? kOk : kRuntimeError);
  });
}

int cmd_inspect(const InspectOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    NetworkConfig nc = o.config ? load_run_config(*o.config).network : NetworkConfig{};
    if (o.ablation == "sa-only") {
      nc.enable_ddpp = false;
      nc.enable_sa = true;
    } else if (o.ablation == "ddpp-only") {
      nc.enable_ddpp = true;
      nc.enable_sa = false;
    } else if (!o.ablation.empty()) {
      throw ConfigError("unknown ablation '" + o.ablation + "' (expected sa-only or ddpp-only)");
    }
    if (o.input.h < 1 || o.input.w < 1) throw ConfigError("input size must be positive");
    nc.validate();
    const InspectReport r = inspect_model(nc, o.input, o.forward);
    print_inspect(out, r);
    return static_cast<int>(r.measured_output && !(*r.measured_output == r.input) ? kRuntimeError : kOk);
  });
}

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.count < 1) throw ConfigError("synth: count must be >= 1");
    if (o.out_dir.empty()) throw ConfigError("synth: output directory required");
    fs::create_directories(o.out_dir);
    DatasetManifest m;
    m.name = "synthetic";
    m.split = o.split;
    m.base_dir = o.out_dir;
    for (int64_t i = 0; i < o.count; ++i) {
      std::ostringstream id;
      id << "synth_" << std::setw(3) << std::setfill('0') << i;
      const Sample s = synthetic_vessel_sample(o.size, o.seed * 1000003 + static_cast<uint64_t>(i), id.str());
      const std::string base = id.str();
      write_image_png(o.out_dir / (base + ".png"), s.image);
      write_mask_png(o.out_dir / (base + "_mask.png"), to_binary(s.mask), o.size.h, o.size.w);
      write_mask_png(o.out_dir / (base + "_fov.png"), to_binary(*s.fov), o.size.h, o.size.w);
      m.entries.push_back({base + ".png", base + "_mask.png", fs::path(base + "_fov.png")});
    }
    write_manifest(m, o.out_dir / "manifest.json");
    out << "wrote " << o.count << " samples and " << (o.out_dir / "manifest.json").string() << "\n";
    return static_cast<int>(kOk);
  });
}

}  // namespace mslae::cli
