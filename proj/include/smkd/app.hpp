#pragma once

// Subcommand implementations shared by the command-line tool, the Python
// module and the acceptance runner.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smkd/checkpoint.hpp"
#include "smkd/config.hpp"
#include "smkd/fewshot.hpp"

namespace smkd {

struct RunOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> init;  // checkpoint to start from
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  bool strict = false;  // architecture hash mismatch is fatal
  // Stage-2 only.
  bool cold_start = false;
  std::optional<std::string> loss;
  std::optional<double> lambda;
  // Set to stop after this many epochs of the current call (tests, resumption).
  std::optional<std::size_t> stop_after_epochs;
};

struct RunOutput {
  std::filesystem::path checkpoint, metrics;
  MetricLog log;
  std::vector<std::string> warnings;
};

/// Stage 1. With `init`, resumes a stage-1 checkpoint from its epoch and step
/// and appends to the existing metrics CSV. Writes
/// <out_dir>/pretrain.ckpt (after every epoch) and pretrain_metrics.csv.
RunOutput run_pretrain(const RunOptions& opts, std::ostream& log);

/// Stage 2. Needs `init` unless cold_start. A stage-1 checkpoint starts a
/// fresh stage (epoch 0, optimizer moments reset when reset_optimizer is on);
/// a stage-2 checkpoint is resumed. Writes train.ckpt and train_metrics.csv.
RunOutput run_train(const RunOptions& opts, std::ostream& log);

struct EvalRequest {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> config;  // defaults to the config stored in the checkpoint
  std::optional<std::size_t> episodes, n_way, k_shot;
  std::optional<std::string> modes, methods;  // comma-separated lists
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  bool strict = false;
};

struct EvalOutput {
  std::vector<ReportRow> rows;
  std::filesystem::path report, episodes;
  std::vector<std::string> warnings;
};

/// Few-shot evaluation of the teacher backbone on the novel classes. Writes
/// eval_report.csv and eval_episodes.csv (one accuracy per episode).
EvalOutput run_eval(const EvalRequest& req, std::ostream& log);

/// Aligned text table of report rows.
std::string format_table(const std::vector<ReportRow>& rows);

struct VisualizeRequest {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> images;  // PPM inputs
  std::optional<std::filesystem::path> out_dir;
  std::size_t top = 8;  // correspondence lines per image pair
};

/// Per image: <stem>_input.ppm and <stem>_head<h>.ppm for every head. Each
/// consecutive pair (1st, 2nd), (3rd, 4th), ... also yields
/// <left>_<right>_match.ppm. Returns the written paths.
std::vector<std::filesystem::path> run_visualize(const VisualizeRequest& req, std::ostream& log);

/// Process exit code for an exception: 1 usage/config, 2 data/format, 3 numeric.
int exit_code_for(const std::exception& e);

}  // namespace smkd
