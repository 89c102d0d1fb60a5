#include "smkd/app.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "smkd/error.hpp"
#include "smkd/visualize.hpp"

namespace smkd {

namespace {

namespace fs = std::filesystem;

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  if (out.empty()) throw ConfigError("empty list '" + s + "'");
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw FormatError("cannot write " + p.string());
  f << text;
}

ExperimentConfig prepare(const RunOptions& opts, Stage stage) {
  auto x = load_experiment(opts.config);
  if (opts.seed) {
    x.train.seed = *opts.seed;
    x.eval.seed = *opts.seed;
  }
  if (opts.out_dir) x.out_dir = *opts.out_dir;
  x.train.stage = stage;
  if (stage == Stage::supervised) {
    if (opts.loss) x.train.loss = parse_loss_mode(*opts.loss);
    if (opts.lambda) x.train.lambda = *opts.lambda;
    x.train.validate(x.vit);
  }
  return x;
}

LoadResult load_for(const fs::path& path, const ExperimentConfig& x, bool strict, std::ostream& log) {
  LoadOptions lo;
  lo.expected_hash = architecture_hash(x.vit, x.head);
  lo.strict = strict;
  auto r = load_checkpoint(path, lo);
  for (const auto& w : r.warnings) log << "warning: " << path.string() << ": " << w << "\n";
  return r;
}

struct StopRequested {};

// Trains one stage, saving the checkpoint and the metrics CSV after every
// epoch so an interrupted run can be resumed from its last completed epoch.
RunOutput train_stage(const ExperimentConfig& x, const RunOptions& opts, Checkpoint ck, const LoadedData& data,
                      const std::string& name, bool append_metrics, std::ostream& log) {
  RunOutput out;
  out.checkpoint = x.out_dir / (name + ".ckpt");
  out.metrics = x.out_dir / (name + "_metrics.csv");
  fs::create_directories(x.out_dir);

  out.log.columns = metric_columns(x.train.stage, x.train.loss);
  std::string header;
  for (std::size_t i = 0; i < out.log.columns.size(); ++i) header += (i ? "," : "") + out.log.columns[i];
  header += '\n';
  std::string previous = header;
  if (append_metrics && fs::exists(out.metrics)) {
    previous = read_file(out.metrics);
    if (previous.rfind(header, 0) != 0)
      throw FormatError(out.metrics.string() + " has different columns; cannot append resumed epochs");
  }

  ck.config_text = x.text;
  ck.config_hash = architecture_hash(ck.model.vit, ck.model.head);
  Trainer trainer(x.train, ck.model, data.all, data.base_indices, std::move(ck.optimizer));
  std::size_t done = 0;
  try {
    trainer.run([&](const EpochMetrics& m) {
      out.log.rows.push_back(m);
      Checkpoint snapshot{ck.model, trainer.optimizer(), ck.config_hash, ck.config_text};
      save_checkpoint(out.checkpoint, snapshot);
      MetricLog rows{out.log.columns, out.log.rows};
      write_file(out.metrics, previous + rows.to_csv().substr(header.size()));
      char line[160];
      std::snprintf(line, sizeof line, "%s epoch %zu/%zu step %zu loss %.4f lr %.3g\n", name.c_str(), m.epoch + 1,
                    x.train.epochs, m.step, m.total, m.lr);
      log << line << std::flush;
      if (opts.stop_after_epochs && ++done >= *opts.stop_after_epochs) throw StopRequested{};
    });
  } catch (const StopRequested&) {
  }
  if (out.log.rows.empty()) {
    // Nothing left to train: still leave a checkpoint and a metrics file behind.
    save_checkpoint(out.checkpoint, Checkpoint{ck.model, trainer.optimizer(), ck.config_hash, ck.config_text});
    if (!fs::exists(out.metrics)) write_file(out.metrics, header);
  }
  return out;
}

}  // namespace

RunOutput run_pretrain(const RunOptions& opts, std::ostream& log) {
  const auto x = prepare(opts, Stage::ssl_pretrain);
  const auto data = load_data(x.data);
  Checkpoint ck;
  std::vector<std::string> warnings;
  if (opts.init) {
    auto r = load_for(*opts.init, x, opts.strict, log);
    warnings = r.warnings;
    ck = std::move(r.checkpoint);
    if (ck.model.stage != Stage::ssl_pretrain)
      throw ContractError(opts.init->string() + " is a supervised-stage checkpoint; pretrain resumes stage 1 only");
  } else {
    ck.model = init_model_pair(x.vit, x.head, x.train.seed);
  }
  auto out = train_stage(x, opts, std::move(ck), data, "pretrain", opts.init.has_value(), log);
  out.warnings = std::move(warnings);
  return out;
}

RunOutput run_train(const RunOptions& opts, std::ostream& log) {
  const auto x = prepare(opts, Stage::supervised);
  const auto data = load_data(x.data);
  Checkpoint ck;
  std::vector<std::string> warnings;
  bool resume = false;
  if (opts.cold_start) {
    if (opts.init) throw ConfigError("--cold-start and --init are mutually exclusive");
    ck.model = init_model_pair(x.vit, x.head, x.train.seed);
    ck.model.stage = Stage::supervised;
  } else {
    if (!opts.init) throw ConfigError("train needs --init <checkpoint> (or --cold-start)");
    auto r = load_for(*opts.init, x, opts.strict, log);
    warnings = r.warnings;
    ck = std::move(r.checkpoint);
    if (ck.model.stage == Stage::ssl_pretrain) {
      ck.model.stage = Stage::supervised;
      ck.model.epoch = 0;
      if (x.train.reset_optimizer) ck.optimizer.reset();
    } else {
      resume = true;
    }
  }
  auto out = train_stage(x, opts, std::move(ck), data, "train", resume, log);
  out.warnings = std::move(warnings);
  return out;
}

std::string format_table(const std::vector<ReportRow>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-32s %3s %3s %9s %8s %8s\n", "method", "mode", "N", "K", "acc(%)", "ci95", "episodes");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s %-32s %3zu %3zu %9.2f %8.2f %8zu\n", to_string(r.method).c_str(),
                  r.mode.name().c_str(), r.n_way, r.k_shot, 100.0 * r.result.mean, 100.0 * r.result.ci95,
                  r.result.accuracies.size());
    out += line;
  }
  return out;
}

EvalOutput run_eval(const EvalRequest& req, std::ostream& log) {
  EvalOutput out;
  LoadOptions lo;
  lo.strict = req.strict;
  ExperimentConfig x;
  LoadResult loaded;
  if (req.config) {
    x = load_experiment(*req.config);
    lo.expected_hash = architecture_hash(x.vit, x.head);
    loaded = load_checkpoint(req.checkpoint, lo);
  } else {
    loaded = load_checkpoint(req.checkpoint, lo);
    x = build_experiment(ConfigFile::parse(loaded.checkpoint.config_text, req.checkpoint.string() + "[config]"));
  }
  out.warnings = loaded.warnings;
  for (const auto& w : out.warnings) log << "warning: " << req.checkpoint.string() << ": " << w << "\n";
  const auto& model = loaded.checkpoint.model;

  EvalOptions e = x.eval;
  if (req.episodes) e.episodes = *req.episodes;
  if (req.n_way) e.n_way = *req.n_way;
  if (req.k_shot) e.k_shot = *req.k_shot;
  if (req.seed) e.seed = *req.seed;
  e.workers = x.workers;
  std::vector<FeatureMode> modes = x.eval_modes;
  std::vector<EvalMethod> methods = x.eval_methods;
  if (req.modes) {
    modes.clear();
    for (const auto& m : split_commas(*req.modes)) modes.push_back(FeatureMode::parse(m));
  }
  if (req.methods) {
    methods.clear();
    for (const auto& m : split_commas(*req.methods)) methods.push_back(parse_eval_method(m));
  }
  if (e.episodes < 2) throw ParameterError("need at least 2 episodes for a confidence interval");

  const auto data = load_data(x.data);
  const auto bank = extract_bank(model.teacher.backbone, model.vit, data.novel, x.workers);
  std::string episodes_csv = "method,mode,episode,accuracy\n";
  char buf[160];
  for (auto method : methods)
    for (auto mode : modes) {
      e.mode = mode;
      e.method = method;
      auto r = evaluate(bank, e);
      if (r.unconverged)
        log << "warning: " << r.unconverged << " classifier fits did not reach the tolerance\n";
      for (std::size_t i = 0; i < r.accuracies.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.17g\n", to_string(method).c_str(), mode.name().c_str(), i,
                      r.accuracies[i]);
        episodes_csv += buf;
      }
      out.rows.push_back({method, mode, e.n_way, e.k_shot, std::move(r)});
    }

  const fs::path dir = req.out_dir ? *req.out_dir : x.out_dir;
  out.report = dir / "eval_report.csv";
  out.episodes = dir / "eval_episodes.csv";
  write_file(out.report, format_report(out.rows));
  write_file(out.episodes, episodes_csv);
  log << format_table(out.rows);
  return out;
}

std::vector<fs::path> run_visualize(const VisualizeRequest& req, std::ostream& log) {
  if (req.images.empty()) throw ConfigError("visualize needs at least one image");
  const auto loaded = load_checkpoint(req.checkpoint);
  const auto& model = loaded.checkpoint.model;
  const fs::path dir = req.out_dir ? *req.out_dir : fs::path("runs") / "visualize";
  fs::create_directories(dir);
  const std::size_t s = model.vit.image_size;

  std::vector<fs::path> written;
  std::vector<std::vector<std::uint8_t>> inputs;
  for (const auto& path : req.images) {
    const auto planar = fit_to_input(read_ppm(path), s);
    const auto stem = path.stem().string();
    const auto tokens = encode_image(model.teacher.backbone, model.vit, planar);
    written.push_back(dir / (stem + "_input.ppm"));
    write_ppm(written.back(), from_planar(planar, s, s));
    const auto maps = attention_heatmaps(tokens, model.vit);
    for (std::size_t h = 0; h < maps.size(); ++h) {
      written.push_back(dir / (stem + "_head" + std::to_string(h) + ".ppm"));
      write_ppm(written.back(), maps[h]);
    }
    inputs.push_back(planar);
  }
  for (std::size_t i = 0; i + 1 < inputs.size(); i += 2) {
    const auto c = draw_correspondence(model.teacher.backbone, model.vit, inputs[i], inputs[i + 1], req.top);
    written.push_back(dir / (req.images[i].stem().string() + "_" + req.images[i + 1].stem().string() + "_match.ppm"));
    write_ppm(written.back(), c.image);
  }
  for (const auto& p : written) log << p.string() << "\n";
  return written;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ContractError*>(&e) ||
      dynamic_cast<const ParameterError*>(&e))
    return 1;
  return 2;
}

}  // namespace smkd
