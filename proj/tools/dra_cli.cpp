#include <iostream>

#include "CLI11.hpp"
#include "dra/commands.hpp"

namespace {

void add_common(CLI::App* sub, dra::CommandOptions& o) {
  sub->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "run seed (overrides the config)");
  sub->add_option("--out", o.out_dir, "output directory");
  sub->add_option("--set", o.sets, "KEY=VALUE override, dotted keys, repeatable")->take_all();
  sub->add_option("--precision", o.precision, "arithmetic precision")->check(CLI::IsMember({"double", "single"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic rank adapter toy benchmark"};
  app.require_subcommand(1);
  dra::CommandOptions o;

  auto* train = app.add_subcommand("train", "pretrain the backbone, fine-tune adapters, write checkpoint and metrics");
  add_common(train, o);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on base and new classes");
  add_common(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint written by train")->required();

  auto* analyze = app.add_subcommand("analyze", "write the routing report for one held-out sample");
  add_common(analyze, o);
  analyze->add_option("--checkpoint", o.checkpoint, "checkpoint written by train")->required();
  analyze->add_option("--sample", o.sample, "index into the held-out base split");
  analyze->add_option("--branch", o.branch, "image or text")->check(CLI::IsMember({"image", "text"}));

  auto* grad = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  add_common(grad, o);
  grad->add_flag("--inject-fault", o.inject_fault, "add a deliberately wrong gradient (must fail)");

  auto* ablate = app.add_subcommand("ablate", "run the component ablation grid over seeds");
  add_common(ablate, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? dra::kExitOk : dra::kExitUsage;
  }

  if (train->parsed()) return dra::cmd_train(o, std::cout, std::cerr);
  if (eval->parsed()) return dra::cmd_eval(o, std::cout, std::cerr);
  if (analyze->parsed()) return dra::cmd_analyze(o, std::cout, std::cerr);
  if (grad->parsed()) return dra::cmd_gradcheck(o, std::cout, std::cerr);
  if (ablate->parsed()) return dra::cmd_ablate(o, std::cout, std::cerr);
  return dra::kExitUsage;
}
