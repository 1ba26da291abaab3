#include <CLI11.hpp>
#include <iostream>

#include "demtg/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"demtg: deformable-mixer multi-task dense prediction, desk scale"};
  app.require_subcommand(1);

  demtg::SynthOpts synth;
  CLI::App* s = app.add_subcommand("synth", "generate a synthetic multi-task dataset");
  s->add_option("--seed", synth.seed, "generator seed");
  s->add_option("--n", synth.n, "sample count");
  s->add_option("--hw", synth.hw, "image height/width (divisible by 32)");
  s->add_option("--classes", synth.classes, "segmentation class count (>=2)");
  s->add_option("--shapes", synth.shapes, "shapes per scene (-1: seeded 1..K-1)");
  s->add_option("--shape-scale", synth.shape_scale, "shape extent as a fraction of the image side");
  s->add_option("-o,--out", synth.out, "output dataset path");

  demtg::TrainOpts train;
  CLI::App* t = app.add_subcommand("train", "train with SGD on a dataset");
  t->add_option("--config", train.config_path, "config file (section.key = value)");
  t->add_option("--data", train.data_path, "dataset path (overrides data.path)");
  t->add_option("-o,--out", train.out_path, "checkpoint path (overrides out.path)");
  t->add_option("--steps", train.steps, "step count override");
  t->add_option("--seed", train.seed, "seed override");

  demtg::EvalOpts eval;
  CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint, or delta_m arithmetic");
  e->add_option("--checkpoint", eval.checkpoint, "checkpoint path");
  e->add_option("--data", eval.data_path, "dataset path");
  e->add_option("--baseline", eval.baseline, "single-task scores score:hi|lo,...");
  e->add_option("--multi", eval.multi, "multi-task scores (skip model; pure delta_m)");
  e->add_option("-o,--out", eval.out_path, "write the JSON report here too");

  demtg::GradcheckOpts gc;
  CLI::App* g = app.add_subcommand("gradcheck", "finite-difference gradient oracle");
  g->add_option("--config", gc.config_path, "config file for the micro model");
  g->add_option("--break", gc.break_op, "debug: corrupt the named primitive's gradient rule");

  CLI11_PARSE(app, argc, argv);

  if (s->parsed()) return demtg::cmd_synth(synth, std::cout, std::cerr);
  if (t->parsed()) return demtg::cmd_train(train, std::cout, std::cerr);
  if (e->parsed()) return demtg::cmd_eval(eval, std::cout, std::cerr);
  if (g->parsed()) return demtg::cmd_gradcheck(gc, std::cout, std::cerr);
  return 2;
}
