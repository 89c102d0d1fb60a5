#include "smkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "smkd/error.hpp"

namespace smkd {

template <typename T>
void Network<T>::visit(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  backbone.visit([&](const std::string& n, BasicTensor<T>& t) { fn("backbone." + n, t); });
  head.visit([&](const std::string& n, BasicTensor<T>& t) { fn("head." + n, t); });
}

template <typename T>
Network<T> init_network(const VitConfig& vit, const HeadConfig& head, Rng& rng, bool requires_grad) {
  Network<T> net;
  net.backbone = init_vit<T>(vit, rng, requires_grad);
  net.head = init_head<T>(head, rng, requires_grad);
  return net;
}

template <typename T>
Network<T> copy_network(Network<T> net, bool requires_grad) {
  net.visit([&](const std::string&, BasicTensor<T>& t) {
    t = t.clone();
    t.set_requires_grad(requires_grad);
  });
  return net;
}

template struct Network<float>;
template struct Network<double>;
template Network<float> init_network<float>(const VitConfig&, const HeadConfig&, Rng&, bool);
template Network<double> init_network<double>(const VitConfig&, const HeadConfig&, Rng&, bool);
template Network<float> copy_network(Network<float>, bool);
template Network<double> copy_network(Network<double>, bool);

Stage parse_stage(const std::string& name) {
  if (name == "ssl_pretrain") return Stage::ssl_pretrain;
  if (name == "supervised") return Stage::supervised;
  throw ConfigError("unknown stage '" + name + "' (expected ssl_pretrain or supervised)");
}

std::string to_string(Stage s) { return s == Stage::ssl_pretrain ? "ssl_pretrain" : "supervised"; }

LossMode parse_loss_mode(const std::string& name) {
  if (name == "ce") return LossMode::ce;
  if (name == "cls") return LossMode::cls;
  if (name == "patch") return LossMode::patch;
  if (name == "ce+patch") return LossMode::ce_patch;
  if (name == "cls+patch") return LossMode::cls_patch;
  throw ConfigError("unknown loss '" + name + "' (expected ce, cls, patch, ce+patch or cls+patch)");
}

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::ce: return "ce";
    case LossMode::cls: return "cls";
    case LossMode::patch: return "patch";
    case LossMode::ce_patch: return "ce+patch";
    case LossMode::cls_patch: return "cls+patch";
  }
  return "cls+patch";
}

bool uses_ce(LossMode m) { return m == LossMode::ce || m == LossMode::ce_patch; }
bool uses_cls(LossMode m) { return m == LossMode::cls || m == LossMode::cls_patch; }
bool uses_patch(LossMode m) { return m == LossMode::patch || m == LossMode::ce_patch || m == LossMode::cls_patch; }

ModelPair init_model_pair(const VitConfig& vit, const HeadConfig& head, std::uint64_t seed) {
  vit.validate();
  head.validate();
  if (head.in_dim != vit.embed_dim) throw ConfigError("head in_dim must equal embed_dim");
  ModelPair mp;
  mp.vit = vit;
  mp.head = head;
  Rng rng(derive_seed(seed, 0x1417));
  mp.student = init_network<float>(vit, head, rng, true);
  mp.teacher = copy_network(mp.student, false);
  mp.center_cls = CenterState<float>::zeros(head.out_dim);
  mp.center_patch = CenterState<float>::zeros(head.out_dim);
  return mp;
}

void ema_update(Network<float>& teacher, const Network<float>& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ParameterError("ema momentum must lie in [0, 1]");
  std::vector<const Tensor*> src;
  const_cast<Network<float>&>(student).visit([&](const std::string&, Tensor& t) { src.push_back(&t); });
  std::size_t i = 0;
  teacher.visit([&](const std::string& name, Tensor& t) {
    const Tensor& s = *src.at(i++);
    if (s.shape() != t.shape()) throw DimensionError("ema_update: shape mismatch for " + name);
    auto dst = t.mutable_data();
    auto sv = s.data();
    for (std::size_t j = 0; j < dst.size(); ++j)
      dst[j] = static_cast<float>(m * double(dst[j]) + (1.0 - m) * double(sv[j]));
  });
}

double cosine_schedule(std::size_t step, std::size_t total, std::size_t warmup_steps, double base, double final) {
  if (step > total) throw ParameterError("cosine_schedule: step beyond total");
  if (step < warmup_steps) return base * double(step) / double(warmup_steps);
  if (total == warmup_steps) return base;
  const double t = double(step - warmup_steps) / double(total - warmup_steps);
  return final + (base - final) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

std::vector<std::pair<std::size_t, std::size_t>> mine_intra_class_pairs(std::span<const int> labels) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[i] == labels[j]) out.emplace_back(i, j);
  return out;
}

// ---- AdamW ----------------------------------------------------------------------

void AdamW::step(const std::vector<std::pair<std::string, Tensor*>>& params, const GradMap<float>& grads, double lr,
                 double weight_decay, double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, double(t_)), bc2 = 1.0 - std::pow(beta2, double(t_));
  for (const auto& [name, p] : params) {
    if (!grads.contains(*p)) continue;
    const auto g = grads.at(*p).data();
    auto w = p->mutable_data();
    auto& st = state_[name];
    if (st.m.size() != w.size()) {
      st.m.assign(w.size(), 0.0f);
      st.v.assign(w.size(), 0.0f);
    }
    const double decay = p->rank() > 1 ? weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = double(g[i]) * grad_scale;
      const double m = beta1 * st.m[i] + (1 - beta1) * gi;
      const double v = beta2 * st.v[i] + (1 - beta2) * gi * gi;
      st.m[i] = static_cast<float>(m);
      st.v[i] = static_cast<float>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + eps) + decay * double(w[i]);
      w[i] = static_cast<float>(double(w[i]) - lr * update);
    }
  }
}

void AdamW::reset() {
  t_ = 0;
  state_.clear();
}

// ---- config and metrics ------------------------------------------------------------

void TrainConfig::validate(const VitConfig& vit) const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (warmup_epochs >= epochs && warmup_epochs != 0) throw ConfigError("warmup_epochs must be smaller than epochs");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(base_lr > 0) || !(final_lr >= 0)) throw ConfigError("learning rates must be positive");
  for (double m : {ema_momentum_start, ema_momentum_end})
    if (!(m >= 0 && m <= 1)) throw ConfigError("ema momenta must lie in [0, 1]");
  if (!(lambda >= 0)) throw ConfigError("lambda must be nonnegative");
  global_aug.validate();
  local_aug.validate();
  if (global_aug.out_size != vit.image_size) throw ConfigError("global crop size must equal image_size");
  if (local_crops > 0 && (local_aug.out_size % vit.patch_size != 0 || local_aug.out_size > vit.image_size))
    throw ConfigError("local crop size must be a multiple of patch_size no larger than image_size");
}

std::vector<std::string> metric_columns(Stage stage, LossMode mode) {
  std::vector<std::string> c{"epoch", "step", "loss_total"};
  if (stage == Stage::ssl_pretrain) {
    c.push_back("loss_cls");
    c.push_back("loss_mim");
  } else {
    if (uses_ce(mode)) c.push_back("loss_ce");
    if (uses_cls(mode)) c.push_back("loss_cls");
    if (uses_patch(mode)) c.push_back("loss_patch");
  }
  c.push_back("lr");
  c.push_back("ema_m");
  return c;
}

std::string MetricLog::to_csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
  out += '\n';
  char buf[64];
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      const auto& c = columns[i];
      if (c == "epoch" || c == "step") {
        std::snprintf(buf, sizeof buf, "%zu", c == "epoch" ? r.epoch : r.step);
      } else {
        const double v = c == "loss_total" ? r.total
                         : c == "loss_cls" ? r.cls
                         : c == "loss_patch" ? r.patch
                         : c == "loss_mim" ? r.mim
                         : c == "loss_ce" ? r.ce
                         : c == "lr" ? r.lr
                                     : r.ema_m;
        std::snprintf(buf, sizeof buf, "%.9g", v);
      }
      out += (i ? "," : "");
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void MetricLog::write(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << to_csv();
}

// ---- trainer --------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, ModelPair& model, const LabeledDataset& data, std::vector<std::size_t> indices,
                 AdamW optimizer)
    : cfg_(std::move(cfg)), model_(model), data_(data), indices_(std::move(indices)), opt_(std::move(optimizer)) {
  cfg_.validate(model_.vit);
  if (indices_.empty()) throw ConfigError("training set is empty");
  if (data_.height != data_.width) throw FormatError("training images must be square");
  if (model_.stage != cfg_.stage) throw ContractError("model stage differs from the training stage");
  steps_per_epoch_ = std::max<std::size_t>(1, indices_.size() / cfg_.batch_size);
  stage_step_ = model_.epoch * steps_per_epoch_;
  std::vector<int> classes;
  for (std::size_t i : indices_) classes.push_back(data_.labels.at(i));
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  for (std::size_t c = 0; c < classes.size(); ++c) class_index_[classes[c]] = static_cast<int>(c);
  if (cfg_.stage == Stage::supervised && uses_ce(cfg_.loss)) {
    const std::size_t d = model_.vit.embed_dim, n = classes.size();
    if (!model_.ce_w.defined() || model_.ce_w.shape() != Shape{d, n}) {
      Rng rng(derive_seed(cfg_.seed, 0xce));
      std::vector<float> w(d * n);
      for (auto& v : w) v = static_cast<float>(truncated_normal(rng, 0.02));
      model_.ce_w = Tensor({d, n}, std::move(w), true);
      model_.ce_b = Tensor::zeros({n}, true);
    }
  }
}

std::vector<std::pair<std::string, Tensor*>> Trainer::trainable() {
  std::vector<std::pair<std::string, Tensor*>> out;
  model_.student.visit([&](const std::string& n, Tensor& t) { out.emplace_back("student." + n, &t); });
  if (cfg_.stage == Stage::supervised && uses_ce(cfg_.loss)) {
    out.emplace_back("ce.w", &model_.ce_w);
    out.emplace_back("ce.b", &model_.ce_b);
  }
  return out;
}

namespace {

double teacher_temperature(const HeadConfig& h, std::size_t epoch) {
  if (epoch >= h.warmup_teacher_temp_epochs) return h.teacher_temp;
  return h.warmup_teacher_temp +
         (h.teacher_temp - h.warmup_teacher_temp) * double(epoch) / double(h.warmup_teacher_temp_epochs);
}

}  // namespace

StepResult Trainer::step(std::span<const std::size_t> batch) {
  const VitConfig& vit = model_.vit;
  const std::size_t B = batch.size(), V = 2 * B, L = cfg_.local_crops, S = vit.image_size;
  const std::size_t N = vit.num_patches(), d = vit.embed_dim, K = model_.head.out_dim, g = vit.grid();
  const std::size_t src = data_.height, ls = cfg_.local_aug.out_size;
  // model_.step counts across stages and seeds the augmentation streams; the
  // schedules follow the position within this stage.
  const std::size_t step = model_.step, total = std::max<std::size_t>(1, total_steps());
  const std::size_t clamped = std::min(stage_step_, total);
  const bool supervised = cfg_.stage == Stage::supervised;
  const bool want_cls = !supervised || uses_cls(cfg_.loss);
  const bool want_patch = !supervised || uses_patch(cfg_.loss);
  const bool want_ce = supervised && uses_ce(cfg_.loss);
  const bool local = L > 0 && want_cls;

  StepResult r;
  r.lr = cosine_schedule(clamped, total, cfg_.warmup_epochs * steps_per_epoch_, cfg_.base_lr, cfg_.final_lr);
  const double wd = cosine_schedule(clamped, total, 0, cfg_.wd_start, cfg_.wd_end);
  r.ema_m = cosine_schedule(clamped, total, 0, cfg_.ema_momentum_start, cfg_.ema_momentum_end);
  const double t_temp = teacher_temperature(model_.head, model_.epoch);

  // Views and masks. Each image draws from its own stream so results do not
  // depend on how batches are scheduled.
  std::vector<float> global(V * 3 * S * S), crops(B * L * 3 * ls * ls);
  std::vector<int> labels(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto img = data_.image(batch[i]);
    labels[i] = data_.labels[batch[i]];
    for (std::size_t a = 0; a < 2; ++a) {
      Rng rng(derive_seed(cfg_.seed, step, i * 64 + a));
      const auto v = augment(img, src, cfg_.global_aug, rng);
      std::copy(v.begin(), v.end(), global.begin() + (i * 2 + a) * 3 * S * S);
    }
    for (std::size_t l = 0; local && l < L; ++l) {
      Rng rng(derive_seed(cfg_.seed, step, i * 64 + 2 + l));
      const auto v = augment(img, src, cfg_.local_aug, rng);
      std::copy(v.begin(), v.end(), crops.begin() + (i * L + l) * 3 * ls * ls);
    }
  }
  std::vector<MaskSpec> masks;
  std::vector<std::uint8_t> flat_mask;
  {
    Rng rng(derive_seed(cfg_.seed, step, 0xa5a5));
    for (std::size_t v = 0; v < V; ++v) {
      masks.push_back(sample_mask(cfg_.mask_kind, g, g, rng, cfg_.mask_ratio, cfg_.block_mask));
      flat_mask.insert(flat_mask.end(), masks.back().grid.begin(), masks.back().grid.end());
    }
  }
  const Tensor images({V, 3, S, S}, std::move(global));

  // Teacher: uncorrupted global views, no gradient.
  TeacherBatch<float> tb;
  Tensor t_cls_logits, t_patch_logits;
  if (want_cls || want_patch) {
    StopGradient sg;
    const bool attn = want_patch && cfg_.patch_weighting == PatchWeighting::attention;
    auto out = forward(patchify(images, vit, model_.teacher.backbone), vit, model_.teacher.backbone, attn);
    t_cls_logits = project(out.cls, model_.teacher.head);
    tb.cls_probs = teacher_distribution(t_cls_logits, model_.center_cls, t_temp);
    if (want_patch) {
      t_patch_logits = project(reshape(out.patches, {V * N, d}), model_.teacher.head);
      tb.patch_probs = reshape(teacher_distribution(t_patch_logits, model_.center_patch, t_temp), {V, N, K});
      tb.features = out.patches;
      if (attn) {
        std::vector<float> w;
        for (std::size_t v = 0; v < V; ++v) {
          const auto cw = cls_attention_weights(out.item(v));
          w.insert(w.end(), cw.data().begin(), cw.data().end());
        }
        tb.attn_weights = Tensor({V, N}, std::move(w));
      }
    }
  }

  // Student: masked global views plus optional local crops.
  auto tokens = patchify(images, vit, model_.student.backbone);
  if (std::any_of(flat_mask.begin(), flat_mask.end(), [](std::uint8_t m) { return m != 0; }))
    tokens = apply_mask_tokens(tokens, std::span<const std::uint8_t>(flat_mask), model_.student.backbone.mask_token);
  auto s_out = forward(tokens, vit, model_.student.backbone, false);
  StudentBatch<float> sb;
  if (want_cls || want_patch) {
    auto cls_logits = project(s_out.cls, model_.student.head);
    if (local) {
      const Tensor local_imgs({B * L, 3, ls, ls}, std::move(crops));
      auto l_out = forward(patchify(local_imgs, vit, model_.student.backbone), vit, model_.student.backbone, false);
      cls_logits = concat<float>({cls_logits, project(l_out.cls, model_.student.head)}, 0);
    }
    sb.cls_probs = student_distribution(cls_logits, model_.head.student_temp);
    if (want_patch) {
      auto pl = project(reshape(s_out.patches, {V * N, d}), model_.student.head);
      sb.patch_probs = reshape(student_distribution(pl, model_.head.student_temp), {V, N, K});
      sb.features = s_out.patches.detach();
    }
  }

  // Pairs and loss.
  std::vector<ViewPair> pairs;
  auto add_local_pairs = [&](std::size_t i) {
    for (std::size_t l = 0; local && l < L; ++l)
      for (std::size_t a = 0; a < 2; ++a) pairs.push_back({i * 2 + a, V + i * L + l, labels[i], true, true});
  };
  Tensor total_loss;
  if (!supervised) {
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t a = 0; a < 2; ++a) pairs.push_back({i * 2 + a, i * 2 + (1 - a), labels[i], true, false});
      add_local_pairs(i);
    }
    auto terms = stage1_loss(tb, sb, pairs, masks, cfg_.normalize_mim);
    total_loss = terms.total;
    r.cls = terms.cls;
    r.mim = terms.mim;
  } else {
    if (want_cls || want_patch) {
      for (const auto& [i, j] : mine_intra_class_pairs(labels))
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            if (i != j || a != b) pairs.push_back({i * 2 + a, j * 2 + b, labels[i], i == j, false});
      for (std::size_t i = 0; i < B; ++i) add_local_pairs(i);
      Stage2Options o;
      o.use_cls = want_cls;
      o.use_patch = want_patch;
      o.lambda = want_cls || want_ce ? cfg_.lambda : 1.0;
      o.weighting = cfg_.patch_weighting;
      auto terms = stage2_loss(tb, sb, pairs, o);
      total_loss = terms.total;
      r.cls = terms.cls;
      r.patch = terms.patch;
    }
    if (want_ce) {
      std::vector<int> y;
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t a = 0; a < 2; ++a) y.push_back(class_index_.at(labels[i]));
      auto ce = classification_ce(linear(s_out.cls, model_.ce_w, model_.ce_b), y);
      r.ce = ce.item();
      total_loss = total_loss.defined() ? add(total_loss, ce) : ce;
    }
  }
  r.total = total_loss.item();
  if (!std::isfinite(r.total)) throw NumericError("non-finite loss");

  // Optimization, EMA and centering.
  auto params = trainable();
  const auto grads = backward(total_loss);
  double scale = 1.0;
  if (cfg_.clip_grad > 0) {
    double ss = 0;
    for (const auto& [name, p] : params)
      if (grads.contains(*p))
        for (float v : grads.at(*p).data()) ss += double(v) * double(v);
    const double norm = std::sqrt(ss);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (norm > cfg_.clip_grad) scale = cfg_.clip_grad / (norm + 1e-6);
  }
  opt_.step(params, grads, r.lr, wd, scale);
  ema_update(model_.teacher, model_.student, r.ema_m);
  if (t_cls_logits.defined())
    model_.center_cls = update_center(model_.center_cls, t_cls_logits, model_.head.center_momentum);
  if (t_patch_logits.defined())
    model_.center_patch = update_center(model_.center_patch, t_patch_logits, model_.head.center_momentum);
  ++model_.step;
  ++stage_step_;
  return r;
}

MetricLog Trainer::run(const std::function<void(const EpochMetrics&)>& on_epoch) {
  MetricLog log;
  log.columns = metric_columns(cfg_.stage, cfg_.loss);
  const std::size_t bs = std::min(cfg_.batch_size, indices_.size());
  for (std::size_t e = model_.epoch; e < cfg_.epochs; ++e) {
    std::vector<std::size_t> order = indices_;
    Rng rng(derive_seed(cfg_.seed, e, 0x5eed));
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics m;
    m.epoch = e;
    for (std::size_t s = 0; s < steps_per_epoch_; ++s) {
      StepResult r;
      try {
        r = step(std::span<const std::size_t>(order.data() + s * bs, bs));
      } catch (const NumericError& err) {
        throw NumericError("epoch " + std::to_string(e) + ", step " + std::to_string(model_.step) + ": " + err.what());
      }
      m.total += r.total;
      m.cls += r.cls;
      m.patch += r.patch;
      m.mim += r.mim;
      m.ce += r.ce;
      m.lr = r.lr;
      m.ema_m = r.ema_m;
    }
    const double n = double(steps_per_epoch_);
    m.total /= n;
    m.cls /= n;
    m.patch /= n;
    m.mim /= n;
    m.ce /= n;
    m.step = model_.step;
    model_.epoch = e + 1;
    log.rows.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return log;
}

}  // namespace smkd
