#include <CLI11.hpp>
#include <iostream>

#include "cli/commands.hpp"

using namespace mslae;
using namespace mslae::cli;

int main(int argc, char** argv) {
  CLI::App app{"mslae: multi-scale attention network for retinal vessel segmentation"};
  app.require_subcommand(1);

  TrainOptions train;
  auto* t = app.add_subcommand("train", "train a model from a run configuration");
  t->add_option("config", train.config, "run configuration (JSON)")->required();
  t->add_flag("--resume", train.resume, "continue from <output_dir>/checkpoints/last.ckpt");

  EvalOptions eval;
  bool fov = false, no_fov = false;
  auto* e = app.add_subcommand("eval", "score a checkpoint or saved predictions");
  e->add_option("config", eval.config, "run configuration (JSON)")->required();
  auto* ck = e->add_option("--checkpoint", eval.checkpoint, "model checkpoint");
  e->add_option("--predictions", eval.predictions, "directory of <id>_prob.png files")->excludes(ck);
  auto* fov_on = e->add_flag("--fov", fov, "restrict counts to the FOV mask");
  e->add_flag("--no-fov", no_fov, "count every pixel")->excludes(fov_on);
  e->add_option("--threshold", eval.threshold, "binarization threshold");
  e->add_option("--out", eval.out_dir, "report directory (default <output_dir>/eval)");

  PredictOptions pred;
  auto* p = app.add_subcommand("predict", "write probability maps and masks");
  p->add_option("--config", pred.config, "run configuration (JSON)");
  p->add_option("--checkpoint", pred.checkpoint, "model checkpoint")->required();
  p->add_option("--out", pred.out_dir, "output directory (default <output_dir>/predictions)");
  p->add_option("--threshold", pred.threshold, "binarization threshold");
  p->add_option("--fov", pred.fovs, "FOV masks, one per image in the same order");
  p->add_option("--manifest", pred.manifest, "predict every entry of a dataset manifest");
  p->add_option("images", pred.images, "input images");

  SuiteOptions verify;
  std::string fault = "none";
  auto* v = app.add_subcommand("verify", "gradient checks, block oracles and metric oracles");
  v->add_option("--seeds", verify.seeds, "gradient check seeds")->expected(1, -1);
  v->add_flag("--inject-grad-fault{sigmoid}", fault, "corrupt a pullback (sigmoid or conv); verify must then fail")
      ->check(CLI::IsMember({"none", "sigmoid", "conv"}));
  v->add_flag("--skip-end-to-end", verify.skip_end_to_end, "leave out the whole-network gradcheck");

  InspectOptions insp;
  std::vector<int64_t> size;
  auto* i = app.add_subcommand("inspect", "per-level architecture table");
  i->add_option("--config", insp.config, "run configuration (JSON)");
  i->add_option("--ablation", insp.ablation, "sa-only or ddpp-only")->check(CLI::IsMember({"sa-only", "ddpp-only"}));
  i->add_option("--input", size, "input height and width")->expected(2);
  i->add_flag("--forward", insp.forward, "run a forward pass and report the output size");

  SynthOptions synth;
  std::vector<int64_t> synth_size;
  std::string split = "train";
  auto* s = app.add_subcommand("synth", "write a synthetic vessel dataset with manifest");
  s->add_option("out", synth.out_dir, "output directory")->required();
  s->add_option("--count", synth.count, "number of samples");
  s->add_option("--size", synth_size, "height and width")->expected(2);
  s->add_option("--seed", synth.seed, "generator seed");
  s->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kConfigError;
  }

  if (*t) return cmd_train(train, std::cout, std::cerr);
  if (*e) {
    if (fov) eval.use_fov = true;
    if (no_fov) eval.use_fov = false;
    return cmd_eval(eval, std::cout, std::cerr);
  }
  if (*p) return cmd_predict(pred, std::cout, std::cerr);
  if (*v) {
    if (fault == "sigmoid") verify.fault = testing::GradFault::flip_sigmoid;
    if (fault == "conv") verify.fault = testing::GradFault::flip_conv_input;
    return cmd_verify(verify, std::cout, std::cerr);
  }
  if (*i) {
    if (size.size() == 2) insp.input = {size[0], size[1]};
    return cmd_inspect(insp, std::cout, std::cerr);
  }
  if (*s) {
    if (synth_size.size() == 2) synth.size = {synth_size[0], synth_size[1]};
    synth.split = parse_split(split);
    return cmd_synth(synth, std::cout, std::cerr);
  }
  return kConfigError;
}
