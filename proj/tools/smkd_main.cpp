// smkd: pretrain / train / eval / visualize.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>

#include "smkd/app.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Two-stage self-supervised / supervised distillation for few-shot ViTs"};
  app.require_subcommand(1);

  std::string config, init, out_dir, loss, mode, method;
  std::uint64_t seed = 0;
  double lambda = 0;
  std::size_t episodes = 0, n_way = 0, k_shot = 0, top = 8;
  bool strict = false, cold_start = false;
  std::vector<std::string> images;

  auto* pretrain = app.add_subcommand("pretrain", "Stage 1: self-supervised pretraining");
  auto* train = app.add_subcommand("train", "Stage 2: supervised distillation");
  auto* eval = app.add_subcommand("eval", "Few-shot evaluation of a checkpoint");
  auto* vis = app.add_subcommand("visualize", "Attention maps and patch correspondences");

  std::map<CLI::App*, std::map<std::string, CLI::Option*>> opts;
  for (auto* sub : {pretrain, train}) {
    opts[sub]["config"] = sub->add_option("--config", config, "experiment config file")->required()->check(CLI::ExistingFile);
    opts[sub]["init"] = sub->add_option("--init", init, "checkpoint to start from");
    opts[sub]["seed"] = sub->add_option("--seed", seed, "overrides the config seed");
    opts[sub]["out"] = sub->add_option("--out-dir", out_dir, "output directory");
    sub->add_flag("--strict", strict, "fail instead of warn on an architecture hash mismatch");
  }
  opts[train]["loss"] = train->add_option("--loss", loss, "ce, cls, patch, ce+patch or cls+patch");
  opts[train]["lambda"] = train->add_option("--lambda", lambda, "weight of the patch loss");
  train->add_flag("--cold-start", cold_start, "train from random initialization");

  opts[eval]["init"] = eval->add_option("--init", init, "checkpoint to evaluate")->required();
  opts[eval]["config"] = eval->add_option("--config", config, "config (defaults to the one stored in the checkpoint)");
  opts[eval]["seed"] = eval->add_option("--seed", seed, "episode sampling seed");
  opts[eval]["episodes"] = eval->add_option("--episodes", episodes, "number of episodes");
  opts[eval]["n_way"] = eval->add_option("--n-way", n_way, "classes per episode");
  opts[eval]["k_shot"] = eval->add_option("--k-shot", k_shot, "support images per class");
  opts[eval]["mode"] = eval->add_option("--mode", mode, "feature modes, comma separated");
  opts[eval]["method"] = eval->add_option("--method", method, "prototype and/or classifier, comma separated");
  opts[eval]["out"] = eval->add_option("--out-dir", out_dir, "output directory");
  eval->add_flag("--strict", strict, "fail instead of warn on an architecture hash mismatch");

  opts[vis]["init"] = vis->add_option("--init", init, "checkpoint")->required();
  vis->add_option("images", images, "PPM images; consecutive pairs also get a correspondence image")->required();
  opts[vis]["out"] = vis->add_option("--out-dir", out_dir, "output directory");
  vis->add_option("--top", top, "correspondence lines per pair");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto* sub = app.get_subcommands().front();
    auto& o = opts[sub];
    auto has = [&](const char* k) { return o.count(k) && o[k]->count() > 0; };
    if (sub == pretrain || sub == train) {
      smkd::RunOptions r;
      r.config = config;
      if (has("init")) r.init = init;
      if (has("seed")) r.seed = seed;
      if (has("out")) r.out_dir = out_dir;
      r.strict = strict;
      if (sub == train) {
        r.cold_start = cold_start;
        if (has("loss")) r.loss = loss;
        if (has("lambda")) r.lambda = lambda;
      }
      const auto out = sub == pretrain ? smkd::run_pretrain(r, std::cout) : smkd::run_train(r, std::cout);
      std::cout << "checkpoint: " << out.checkpoint.string() << "\nmetrics: " << out.metrics.string() << "\n";
    } else if (sub == eval) {
      smkd::EvalRequest q;
      q.checkpoint = init;
      if (has("config")) q.config = config;
      if (has("seed")) q.seed = seed;
      if (has("episodes")) q.episodes = episodes;
      if (has("n_way")) q.n_way = n_way;
      if (has("k_shot")) q.k_shot = k_shot;
      if (has("mode")) q.modes = mode;
      if (has("method")) q.methods = method;
      if (has("out")) q.out_dir = out_dir;
      q.strict = strict;
      const auto out = smkd::run_eval(q, std::cout);
      std::cout << "report: " << out.report.string() << "\n";
    } else {
      smkd::VisualizeRequest v;
      v.checkpoint = init;
      for (const auto& p : images) v.images.emplace_back(p);
      if (has("out")) v.out_dir = out_dir;
      v.top = top;
      smkd::run_visualize(v, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return smkd::exit_code_for(e);
  }
  return 0;
}
