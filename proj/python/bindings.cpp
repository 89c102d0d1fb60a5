#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <iostream>
#include <sstream>

#include "smkd/app.hpp"
#include "smkd/checkpoint.hpp"
#include "smkd/config.hpp"
#include "smkd/error.hpp"
#include "smkd/losses.hpp"
#include "smkd/masking.hpp"

namespace py = pybind11;
using namespace smkd;

namespace {

// Column name -> per-epoch values, read back from the CSV the run wrote.
py::dict metric_log_dict(const MetricLog& log) {
  std::istringstream in(log.to_csv());
  std::string line, cell;
  std::getline(in, line);
  std::vector<py::list> cols(log.columns.size());
  while (std::getline(in, line)) {
    std::istringstream row(line);
    for (std::size_t c = 0; c < cols.size() && std::getline(row, cell, ','); ++c) cols[c].append(std::stod(cell));
  }
  py::dict out;
  for (std::size_t c = 0; c < cols.size(); ++c) out[py::str(log.columns[c])] = cols[c];
  return out;
}

py::dict run_output_dict(const RunOutput& r) {
  py::dict out;
  out["checkpoint"] = r.checkpoint;
  out["metrics"] = r.metrics;
  out["log"] = metric_log_dict(r.log);
  out["warnings"] = r.warnings;
  return out;
}

RunOptions run_options(const std::filesystem::path& config, std::optional<std::filesystem::path> init,
                       std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out_dir,
                       bool strict) {
  RunOptions o;
  o.config = config;
  o.init = std::move(init);
  o.seed = seed;
  o.out_dir = std::move(out_dir);
  o.strict = strict;
  return o;
}

// Progress goes to Python's stdout only when asked; the C++ stream is silent otherwise.
std::ostream& progress_stream(bool verbose) {
  static std::ostringstream sink;
  sink.str({});
  return verbose ? std::cout : static_cast<std::ostream&>(sink);
}

Tensor tensor_from(py::array_t<float, py::array::c_style | py::array::forcecast> a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

}  // namespace

PYBIND11_MODULE(_smkd, m) {
  m.doc() = "Patch-level self/supervised knowledge distillation for few-shot ViTs";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

  m.def(
      "pretrain",
      [](const std::filesystem::path& config, std::optional<std::filesystem::path> init,
         std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out_dir, bool strict,
         std::optional<std::size_t> epochs, bool verbose) {
        auto o = run_options(config, std::move(init), seed, std::move(out_dir), strict);
        o.stop_after_epochs = epochs;
        RunOutput r;
        {
          py::gil_scoped_release release;
          r = run_pretrain(o, progress_stream(verbose));
        }
        return run_output_dict(r);
      },
      py::arg("config"), py::arg("init") = py::none(), py::arg("seed") = py::none(),
      py::arg("out_dir") = py::none(), py::arg("strict") = false, py::arg("epochs") = py::none(),
      py::arg("verbose") = false,
      "Self-supervised stage. `epochs` stops early after that many epochs of this call.");

  m.def(
      "train",
      [](const std::filesystem::path& config, std::optional<std::filesystem::path> init,
         std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out_dir, bool strict,
         bool cold_start, std::optional<std::string> loss, std::optional<double> lambda_,
         std::optional<std::size_t> epochs, bool verbose) {
        auto o = run_options(config, std::move(init), seed, std::move(out_dir), strict);
        o.cold_start = cold_start;
        o.loss = std::move(loss);
        o.lambda = lambda_;
        o.stop_after_epochs = epochs;
        RunOutput r;
        {
          py::gil_scoped_release release;
          r = run_train(o, progress_stream(verbose));
        }
        return run_output_dict(r);
      },
      py::arg("config"), py::arg("init") = py::none(), py::arg("seed") = py::none(),
      py::arg("out_dir") = py::none(), py::arg("strict") = false, py::arg("cold_start") = false,
      py::arg("loss") = py::none(), py::arg("lambda_") = py::none(), py::arg("epochs") = py::none(),
      py::arg("verbose") = false, "Supervised stage, from a stage-1 checkpoint or a cold start.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, std::optional<std::filesystem::path> config,
         std::optional<std::size_t> episodes, std::optional<std::size_t> n_way, std::optional<std::size_t> k_shot,
         std::optional<std::string> modes, std::optional<std::string> methods, std::optional<std::uint64_t> seed,
         std::optional<std::filesystem::path> out_dir, bool strict, bool verbose) {
        EvalRequest req{checkpoint, std::move(config), episodes, n_way, k_shot, std::move(modes),
                        std::move(methods), seed, std::move(out_dir), strict};
        EvalOutput r;
        {
          py::gil_scoped_release release;
          r = run_eval(req, progress_stream(verbose));
        }
        py::list rows;
        for (const auto& row : r.rows) {
          py::dict d;
          d["method"] = to_string(row.method);
          d["mode"] = row.mode.name();
          d["n_way"] = row.n_way;
          d["k_shot"] = row.k_shot;
          d["mean_acc"] = row.result.mean;
          d["ci95"] = row.result.ci95;
          d["accuracies"] = row.result.accuracies;
          rows.append(d);
        }
        py::dict out;
        out["rows"] = rows;
        out["report"] = r.report;
        out["episodes"] = r.episodes;
        out["warnings"] = r.warnings;
        return out;
      },
      py::arg("checkpoint"), py::arg("config") = py::none(), py::arg("episodes") = py::none(),
      py::arg("n_way") = py::none(), py::arg("k_shot") = py::none(), py::arg("modes") = py::none(),
      py::arg("methods") = py::none(), py::arg("seed") = py::none(), py::arg("out_dir") = py::none(),
      py::arg("strict") = false, py::arg("verbose") = false,
      "Few-shot episodes on the novel classes. `modes` and `methods` are comma-separated lists.");

  m.def(
      "visualize",
      [](const std::filesystem::path& checkpoint, std::vector<std::filesystem::path> images,
         std::optional<std::filesystem::path> out_dir, std::size_t top) {
        VisualizeRequest req{checkpoint, std::move(images), std::move(out_dir), top};
        py::gil_scoped_release release;
        std::ostringstream sink;
        return run_visualize(req, sink);
      },
      py::arg("checkpoint"), py::arg("images"), py::arg("out_dir") = py::none(), py::arg("top") = 8,
      "Attention heatmaps per head and patch correspondences for consecutive image pairs.");

  m.def(
      "checkpoint_info",
      [](const std::filesystem::path& path) {
        auto loaded = load_checkpoint(path);
        const auto& ck = loaded.checkpoint;
        py::dict d;
        d["stage"] = to_string(ck.model.stage);
        d["epoch"] = ck.model.epoch;
        d["step"] = ck.model.step;
        d["config_hash"] = ck.config_hash;
        d["architecture_hash"] = architecture_hash(ck.model.vit, ck.model.head);
        d["config_text"] = ck.config_text;
        d["has_classifier"] = ck.model.ce_w.defined();
        return d;
      },
      py::arg("path"), "Training state and provenance stored in a checkpoint.");

  m.def(
      "match_patches",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> teacher,
         py::array_t<float, py::array::c_style | py::array::forcecast> student) {
        auto mm = match_patches(tensor_from(teacher), tensor_from(student));
        return py::make_tuple(mm.k_plus, mm.sims);
      },
      py::arg("teacher"), py::arg("student"),
      "For each teacher patch (rows of an N x D array) the most cosine-similar student patch and its similarity.");

  m.def(
      "block_mask",
      [](std::size_t grid_h, std::size_t grid_w, double ratio, std::uint64_t seed) {
        Rng rng(seed);
        auto spec = sample_block_mask(grid_h, grid_w, ratio, rng);
        py::array_t<bool> out({grid_h, grid_w});
        auto* p = out.mutable_data();
        for (std::size_t i = 0; i < spec.grid.size(); ++i) p[i] = spec.grid[i] != 0;
        return out;
      },
      py::arg("grid_h"), py::arg("grid_w"), py::arg("ratio"), py::arg("seed") = 0,
      "Blockwise patch mask with ceil(ratio * N) cells set.");
}
