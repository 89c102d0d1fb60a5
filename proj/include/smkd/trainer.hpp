#pragma once

// Two-stage teacher/student training: self-supervised pretraining with
// [cls] self-distillation and masked image modeling, then supervised
// intra-class [cls]/[patch] distillation.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "smkd/data.hpp"
#include "smkd/head.hpp"
#include "smkd/losses.hpp"
#include "smkd/masking.hpp"
#include "smkd/vit.hpp"

namespace smkd {

/// Backbone plus projection head. Parameter names are prefixed with
/// "backbone." and "head.".
template <typename T>
struct Network {
  VitParams<T> backbone;
  HeadParams<T> head;

  void visit(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
};

template <typename T>
Network<T> init_network(const VitConfig& vit, const HeadConfig& head, Rng& rng, bool requires_grad);

/// Deep copy with fresh leaves.
template <typename T>
Network<T> copy_network(Network<T> net, bool requires_grad);

enum class Stage { ssl_pretrain, supervised };
enum class LossMode { ce, cls, patch, ce_patch, cls_patch };

Stage parse_stage(const std::string& name);
std::string to_string(Stage s);
LossMode parse_loss_mode(const std::string& name);
std::string to_string(LossMode m);
bool uses_ce(LossMode m);
bool uses_cls(LossMode m);
bool uses_patch(LossMode m);

struct ModelPair {
  VitConfig vit;
  HeadConfig head;
  Network<float> student, teacher;
  CenterState<float> center_cls, center_patch;
  Tensor ce_w, ce_b;  // linear classifier on the student [cls] token (CE modes only)
  std::size_t step = 0;
  std::size_t epoch = 0;
  Stage stage = Stage::ssl_pretrain;
};

/// Random student, teacher initialized as an exact copy.
ModelPair init_model_pair(const VitConfig& vit, const HeadConfig& head, std::uint64_t seed);

/// theta_t <- m * theta_t + (1 - m) * theta_s for every backbone and head
/// parameter. Evaluated in double and rounded once.
void ema_update(Network<float>& teacher, const Network<float>& student, double m);

/// Linear warmup 0 -> base over warmup_steps, then cosine decay to final at total.
double cosine_schedule(std::size_t step, std::size_t total, std::size_t warmup_steps, double base, double final);

/// All ordered (i, j) with labels[i] == labels[j], i == j included.
std::vector<std::pair<std::size_t, std::size_t>> mine_intra_class_pairs(std::span<const int> labels);

/// Decoupled-weight-decay Adam. Rank <= 1 parameters (biases, norms, tokens)
/// are not decayed.
class AdamW {
 public:
  struct Moments {
    std::vector<float> m, v;
  };

  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  /// Gradients are multiplied by grad_scale before use (norm clipping).
  void step(const std::vector<std::pair<std::string, Tensor*>>& params, const GradMap<float>& grads, double lr,
            double weight_decay, double grad_scale = 1.0);
  void reset();

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct TrainConfig {
  Stage stage = Stage::ssl_pretrain;
  LossMode loss = LossMode::cls_patch;  // supervised stage only
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double base_lr = 5e-4;
  double final_lr = 1e-5;
  std::size_t warmup_epochs = 3;
  double wd_start = 0.04, wd_end = 0.4;
  double ema_momentum_start = 0.996, ema_momentum_end = 1.0;
  double lambda = 0.45;
  std::uint64_t seed = 0;
  double clip_grad = 3.0;  // global gradient norm; 0 disables
  bool normalize_mim = true;
  PatchWeighting patch_weighting = PatchWeighting::uniform;
  MaskKind mask_kind = MaskKind::block;
  MaskRatioParams mask_ratio;
  BlockMaskParams block_mask;
  AugmentParams global_aug;
  AugmentParams local_aug = [] {
    AugmentParams p;
    p.out_size = 16;
    p.scale_lo = 0.05;
    p.scale_hi = 0.4;
    return p;
  }();
  std::size_t local_crops = 0;
  bool reset_optimizer = true;

  void validate(const VitConfig& vit) const;
};

struct EpochMetrics {
  std::size_t epoch = 0, step = 0;
  double total = 0, cls = 0, patch = 0, mim = 0, ce = 0;
  double lr = 0, ema_m = 0;
};

/// Per-epoch loss log. Component columns depend on the stage and loss mode.
struct MetricLog {
  std::vector<std::string> columns;
  std::vector<EpochMetrics> rows;

  std::string to_csv() const;
  void write(const std::filesystem::path& path) const;
};

std::vector<std::string> metric_columns(Stage stage, LossMode mode);

struct StepResult {
  double total = 0, cls = 0, patch = 0, mim = 0, ce = 0;
  double lr = 0, ema_m = 0;
};

/// Owns the optimization state of one stage. The ModelPair is updated in place.
class Trainer {
 public:
  /// `indices` selects training images from `data`; their labels feed pair
  /// mining and, in CE modes, the linear classifier.
  Trainer(TrainConfig cfg, ModelPair& model, const LabeledDataset& data, std::vector<std::size_t> indices,
          AdamW optimizer = {});

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return steps_per_epoch_ * cfg_.epochs; }

  /// One optimization step on the given dataset images.
  StepResult step(std::span<const std::size_t> batch);

  /// Runs epochs model.epoch .. cfg.epochs - 1. Schedules resume at
  /// model.epoch * steps_per_epoch(). Throws NumericError on a
  /// non-finite loss, naming the epoch and step.
  MetricLog run(const std::function<void(const EpochMetrics&)>& on_epoch = {});

  AdamW& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> trainable();

  TrainConfig cfg_;
  ModelPair& model_;
  const LabeledDataset& data_;
  std::vector<std::size_t> indices_;
  std::map<int, int> class_index_;
  std::size_t steps_per_epoch_ = 1;
  std::size_t stage_step_ = 0;  // schedule position within the stage
  AdamW opt_;
};

}  // namespace smkd
