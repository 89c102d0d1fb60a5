#include "smkd/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "smkd/error.hpp"
#include "test_util.hpp"

using namespace smkd;

namespace {

VitConfig micro_vit() {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}

HeadConfig micro_head() {
  HeadConfig h;
  h.in_dim = 8;
  h.hidden_dim = 16;
  h.bottleneck_dim = 8;
  h.out_dim = 16;
  return h;
}

TrainConfig micro_train(Stage stage, std::size_t epochs = 1, std::size_t batch = 4) {
  TrainConfig t;
  t.stage = stage;
  t.epochs = epochs;
  t.batch_size = batch;
  t.warmup_epochs = 0;
  t.global_aug = AugmentParams::identity(8);
  t.global_aug.flip_prob = 0.5;
  t.global_aug.scale_lo = 0.5;
  t.local_aug.out_size = 4;
  return t;
}

std::vector<std::size_t> all_indices(const LabeledDataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

std::vector<float> flatten(Network<float>& net) {
  std::vector<float> out;
  net.visit([&](const std::string&, Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

// Distance in units in the last place between two floats of equal sign.
std::int64_t ulp_distance(float a, float b) {
  if (a == b) return 0;
  std::int32_t ia, ib;
  std::memcpy(&ia, &a, 4);
  std::memcpy(&ib, &b, 4);
  if (ia < 0) ia = std::numeric_limits<std::int32_t>::min() - ia;
  if (ib < 0) ib = std::numeric_limits<std::int32_t>::min() - ib;
  return std::llabs(std::int64_t(ia) - std::int64_t(ib));
}

}  // namespace

TEST(PairMining, DistinctLabelsGiveSelfPairs) {
  std::vector<int> labels{0, 1, 2};
  auto pairs = mine_intra_class_pairs(labels);
  EXPECT_EQ(pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}, {2, 2}}));
}

TEST(PairMining, SameLabelGivesAllOrderedPairs) {
  std::vector<int> labels{5, 5};
  EXPECT_EQ(mine_intra_class_pairs(labels).size(), 4u);
}

TEST(PairMining, MatchesDoubleLoopOracle) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<int> labels(1 + t % 12);
    for (auto& l : labels) l = static_cast<int>(rng() % 4);
    std::set<std::pair<std::size_t, std::size_t>> expected;
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t j = 0; j < labels.size(); ++j)
        if (labels[i] == labels[j]) expected.insert({i, j});
    auto got = mine_intra_class_pairs(labels);
    EXPECT_EQ(std::set(got.begin(), got.end()), expected);
    EXPECT_EQ(got.size(), expected.size());
  }
}

TEST(Ema, Endpoints) {
  auto mp = init_model_pair(micro_vit(), micro_head(), 1);
  Rng rng(9);
  auto student = init_network<float>(mp.vit, mp.head, rng, false);
  const auto before = flatten(mp.teacher);
  ema_update(mp.teacher, student, 1.0);
  EXPECT_EQ(flatten(mp.teacher), before);
  ema_update(mp.teacher, student, 0.0);
  EXPECT_EQ(flatten(mp.teacher), flatten(student));
  EXPECT_THROW(ema_update(mp.teacher, student, 1.5), ParameterError);
}

TEST(Ema, ArithmeticCase) {
  auto mp = init_model_pair(micro_vit(), micro_head(), 1);
  mp.teacher.visit([](const std::string&, Tensor& t) { t = Tensor::full(t.shape(), 1.0f); });
  mp.student.visit([](const std::string&, Tensor& t) { t = Tensor::full(t.shape(), 0.0f); });
  ema_update(mp.teacher, mp.student, 0.9);
  for (float v : flatten(mp.teacher)) EXPECT_FLOAT_EQ(v, 0.9f);
}

TEST(Ema, FiveStepReplayMatchesClosedForm) {
  auto ds = generate_synthetic({4, 4, 8, 2});
  auto mp = init_model_pair(micro_vit(), micro_head(), 2);
  auto cfg = micro_train(Stage::ssl_pretrain, 5);
  cfg.ema_momentum_start = 0.9;
  cfg.ema_momentum_end = 0.99;
  Trainer trainer(cfg, mp, ds, all_indices(ds));
  const auto theta0 = flatten(mp.teacher);
  std::vector<std::vector<float>> students;
  std::vector<double> momenta;
  std::vector<std::size_t> batch{0, 5, 10, 15};
  for (int s = 0; s < 5; ++s) {
    auto r = trainer.step(batch);
    students.push_back(flatten(mp.student));
    momenta.push_back(r.ema_m);
  }
  const auto teacher = flatten(mp.teacher);
  // Closed form in extended precision. Each f32 step rounds once, so the error
  // is bounded in ulps of the magnitudes entering the recursion; measuring
  // against the result's own ulp would be meaningless when terms cancel.
  double worst = 0;
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    // theta_T = prod(m) theta_0 + sum_k (1 - m_k) prod_{j > k} m_j theta_s^k
    long double acc = 0, keep = 1;
    float scale = std::abs(theta0[i]);
    for (int k = 4; k >= 0; --k) {
      acc += (1.0L - momenta[k]) * keep * students[k][i];
      keep *= momenta[k];
      scale = std::max(scale, std::abs(students[k][i]));
    }
    acc += keep * theta0[i];
    if (scale == 0) continue;
    const double ulp = double(std::nextafter(scale, INFINITY) - scale);
    worst = std::max(worst, double(std::abs(teacher[i] - acc)) / ulp);
  }
  EXPECT_LE(worst, 4.0);

  // Step-by-step replay with the same single rounding per step is exact.
  std::vector<float> replay = theta0;
  for (int k = 0; k < 5; ++k)
    for (std::size_t i = 0; i < replay.size(); ++i)
      replay[i] = static_cast<float>(momenta[k] * double(replay[i]) + (1.0 - momenta[k]) * double(students[k][i]));
  std::int64_t worst_ulp = 0;
  for (std::size_t i = 0; i < replay.size(); ++i) worst_ulp = std::max(worst_ulp, ulp_distance(teacher[i], replay[i]));
  EXPECT_EQ(worst_ulp, 0);
}

TEST(Schedule, CosinePoints) {
  EXPECT_DOUBLE_EQ(cosine_schedule(10, 110, 10, 5e-4, 1e-5), 5e-4);
  EXPECT_DOUBLE_EQ(cosine_schedule(110, 110, 10, 5e-4, 1e-5), 1e-5);
  EXPECT_NEAR(cosine_schedule(60, 110, 10, 5e-4, 1e-5), (5e-4 + 1e-5) / 2, 1e-18);
  EXPECT_DOUBLE_EQ(cosine_schedule(0, 110, 10, 5e-4, 1e-5), 0.0);
  EXPECT_DOUBLE_EQ(cosine_schedule(5, 110, 10, 5e-4, 1e-5), 2.5e-4);
  EXPECT_DOUBLE_EQ(cosine_schedule(0, 10, 0, 0.996, 1.0), 0.996);
  EXPECT_THROW(cosine_schedule(11, 10, 0, 1, 0), ParameterError);
}

TEST(AdamWTest, NoDecayForVectors) {
  Tensor w = Tensor::full({2, 2}, 1.0f), b = Tensor::full({2}, 1.0f);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  auto loss = add(sum(w), sum(b));
  auto grads = backward(scale(loss, 0.0f));
  AdamW opt;
  opt.step({{"w", &w}, {"b", &b}}, grads, 0.1, 0.5);
  EXPECT_FLOAT_EQ(w.data()[0], 1.0f - 0.1f * 0.5f);
  EXPECT_FLOAT_EQ(b.data()[0], 1.0f);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamWTest, FirstStepMovesBySignTimesLr) {
  Tensor w = Tensor::full({3}, 0.0f);
  w.set_requires_grad(true);
  auto grads = backward(sum(mul(w, Tensor({3}, {1.0f, -2.0f, 0.5f}))));
  AdamW opt;
  opt.step({{"w", &w}}, grads, 0.01, 0.0);
  EXPECT_NEAR(w.data()[0], -0.01f, 1e-7);
  EXPECT_NEAR(w.data()[1], 0.01f, 1e-7);
  EXPECT_NEAR(w.data()[2], -0.01f, 1e-7);
}

TEST(TrainerTest, OneEpochSmokeRun) {
  auto ds = generate_synthetic({4, 2, 8, 1});
  auto mp = init_model_pair(micro_vit(), micro_head(), 1);
  Trainer trainer(micro_train(Stage::ssl_pretrain, 1, 4), mp, ds, all_indices(ds));
  auto log = trainer.run();
  ASSERT_EQ(log.rows.size(), 1u);
  EXPECT_EQ(log.rows[0].step, 2u);
  EXPECT_TRUE(std::isfinite(log.rows[0].total));
  EXPECT_TRUE(std::isfinite(log.rows[0].cls));
  EXPECT_TRUE(std::isfinite(log.rows[0].mim));
  EXPECT_EQ(mp.epoch, 1u);
  EXPECT_EQ(log.columns, (std::vector<std::string>{"epoch", "step", "loss_total", "loss_cls", "loss_mim", "lr", "ema_m"}));
}

TEST(TrainerTest, TeacherNeverReceivesGradientButTracksStudent) {
  auto ds = generate_synthetic({4, 2, 8, 1});
  auto mp = init_model_pair(micro_vit(), micro_head(), 4);
  auto cfg = micro_train(Stage::ssl_pretrain);
  cfg.ema_momentum_start = cfg.ema_momentum_end = 0.5;
  Trainer trainer(cfg, mp, ds, all_indices(ds));
  const auto before = flatten(mp.teacher);
  trainer.step(std::vector<std::size_t>{0, 1, 2, 3});
  mp.teacher.visit([](const std::string& n, Tensor& t) { EXPECT_FALSE(t.requires_grad()) << n; });
  EXPECT_NE(flatten(mp.teacher), before);
}

// Default desk architecture, fixed batch and views, teacher frozen (EMA 1.0)
// and its center placed at the fixed point of the centering recursion, so the
// target distribution stays constant.
TEST(TrainerTest, ClsLossStrictlyDecreasesOnFrozenBatch) {
  const VitConfig vit;
  const HeadConfig head;
  auto ds = generate_synthetic({4, 2, 32, 5});
  auto mp = init_model_pair(vit, head, 5);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.warmup_epochs = 0;
  cfg.global_aug = AugmentParams::identity(32);
  cfg.mask_kind = MaskKind::none;
  cfg.base_lr = cfg.final_lr = 1e-3;
  cfg.ema_momentum_start = cfg.ema_momentum_end = 1.0;
  const std::vector<std::size_t> batch{0, 2, 4, 6};
  {
    StopGradient sg;
    std::vector<float> px;
    for (auto i : batch)
      for (int a = 0; a < 2; ++a) {
        const auto v = normalize_image(ds.image(i));
        px.insert(px.end(), v.begin(), v.end());
      }
    const Tensor images({8, 3, 32, 32}, std::move(px));
    const auto out = forward(patchify(images, vit, mp.teacher.backbone), vit, mp.teacher.backbone, false);
    mp.center_cls = update_center(mp.center_cls, project(out.cls, mp.teacher.head), 0.0);
  }
  Trainer trainer(cfg, mp, ds, all_indices(ds));
  double prev = std::numeric_limits<double>::infinity();
  for (int s = 0; s < 50; ++s) {
    auto r = trainer.step(batch);
    EXPECT_LT(r.cls, prev) << "step " << s;
    EXPECT_EQ(r.mim, 0.0);
    prev = r.cls;
  }
}

TEST(TrainerTest, LambdaZeroTotalEqualsClsColumn) {
  auto ds = generate_synthetic({2, 4, 8, 6});
  auto mp = init_model_pair(micro_vit(), micro_head(), 6);
  mp.stage = Stage::supervised;
  auto cfg = micro_train(Stage::supervised, 2);
  cfg.loss = LossMode::cls_patch;
  cfg.lambda = 0.0;
  Trainer trainer(cfg, mp, ds, all_indices(ds));
  auto log = trainer.run();
  EXPECT_EQ(log.columns, (std::vector<std::string>{"epoch", "step", "loss_total", "loss_cls", "loss_patch", "lr", "ema_m"}));
  for (const auto& row : log.rows) {
    EXPECT_EQ(row.total, row.cls);
    EXPECT_GT(row.patch, 0.0);
  }
}

TEST(TrainerTest, CeModeHasNoPatchColumn) {
  auto ds = generate_synthetic({2, 4, 8, 7});
  auto mp = init_model_pair(micro_vit(), micro_head(), 7);
  mp.stage = Stage::supervised;
  auto cfg = micro_train(Stage::supervised);
  cfg.loss = LossMode::ce;
  Trainer trainer(cfg, mp, ds, all_indices(ds));
  auto log = trainer.run();
  EXPECT_EQ(log.columns, (std::vector<std::string>{"epoch", "step", "loss_total", "loss_ce", "lr", "ema_m"}));
  EXPECT_EQ(log.to_csv().find("loss_patch"), std::string::npos);
  EXPECT_EQ(mp.ce_w.shape(), (Shape{8, 2}));
  EXPECT_NEAR(log.rows[0].total, log.rows[0].ce, 0);
}

TEST(TrainerTest, AllLossModesRun) {
  auto ds = generate_synthetic({2, 4, 8, 8});
  for (auto mode : {LossMode::ce, LossMode::cls, LossMode::patch, LossMode::ce_patch, LossMode::cls_patch}) {
    auto mp = init_model_pair(micro_vit(), micro_head(), 8);
    mp.stage = Stage::supervised;
    auto cfg = micro_train(Stage::supervised);
    cfg.loss = mode;
    cfg.local_crops = 2;
    cfg.patch_weighting = PatchWeighting::attention;
    Trainer trainer(cfg, mp, ds, all_indices(ds));
    auto log = trainer.run();
    EXPECT_TRUE(std::isfinite(log.rows[0].total)) << to_string(mode);
    EXPECT_EQ(parse_loss_mode(to_string(mode)), mode);
  }
}

TEST(TrainerTest, StageMismatchIsRejected) {
  auto ds = generate_synthetic({2, 4, 8, 8});
  auto mp = init_model_pair(micro_vit(), micro_head(), 8);
  EXPECT_THROW(Trainer(micro_train(Stage::supervised), mp, ds, all_indices(ds)), ContractError);
}

TEST(TrainerTest, DeterministicForFixedSeed) {
  auto ds = generate_synthetic({4, 4, 8, 9});
  auto run = [&](std::uint64_t seed) {
    auto mp = init_model_pair(micro_vit(), micro_head(), seed);
    auto cfg = micro_train(Stage::ssl_pretrain, 2);
    cfg.seed = seed;
    cfg.local_crops = 1;
    Trainer trainer(cfg, mp, ds, all_indices(ds));
    return std::make_pair(trainer.run().to_csv(), flatten(mp.teacher));
  };
  const auto a = run(11), b = run(11), c = run(12);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first, c.first);
}

TEST(TrainerTest, ResumeContinuesFromModelEpoch) {
  auto ds = generate_synthetic({4, 4, 8, 10});
  const auto cfg = micro_train(Stage::ssl_pretrain, 2);
  auto full = init_model_pair(micro_vit(), micro_head(), 3);
  auto log_full = Trainer(cfg, full, ds, all_indices(ds)).run();

  // Interrupt after the first epoch, then resume with the saved optimizer.
  struct Stop {};
  auto part = init_model_pair(micro_vit(), micro_head(), 3);
  Trainer first(cfg, part, ds, all_indices(ds));
  EXPECT_THROW(first.run([](const EpochMetrics&) { throw Stop{}; }), Stop);
  EXPECT_EQ(part.epoch, 1u);
  Trainer second(cfg, part, ds, all_indices(ds), first.optimizer());
  auto log_rest = second.run();
  ASSERT_EQ(log_rest.rows.size(), 1u);
  EXPECT_EQ(log_rest.rows[0].epoch, 1u);
  EXPECT_EQ(log_rest.rows[0].step, log_full.rows[1].step);
  EXPECT_EQ(log_rest.rows[0].total, log_full.rows[1].total);
  EXPECT_EQ(flatten(part.student), flatten(full.student));
  EXPECT_EQ(flatten(part.teacher), flatten(full.teacher));
}

TEST(TrainerTest, NonFiniteLossNamesEpochAndStep) {
  auto ds = generate_synthetic({4, 2, 8, 1});
  auto mp = init_model_pair(micro_vit(), micro_head(), 1);
  mp.student.backbone.cls_token.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer trainer(micro_train(Stage::ssl_pretrain), mp, ds, all_indices(ds));
  try {
    trainer.run();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, step 0"), std::string::npos) << e.what();
  }
}

// Full stage-2 loss through backbone and head in double precision, checked by
// central differences on a random 1% sample of all student parameter entries.
TEST(TrainerGradient, Stage2LossOnSampledParameters) {
  const auto vit = micro_vit();
  const auto head = micro_head();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 100);
    auto student = init_network<double>(vit, head, rng, true);
    auto teacher = copy_network(student, false);
    // Larger weights exercise the nonlinearities.
    student.visit([&](const std::string&, Tensor64& t) {
      t = smkd::testing::random_tensor<double>(t.shape(), rng, -0.5, 0.5);
      t.set_requires_grad(true);
    });
    const std::size_t V = 4, N = vit.num_patches(), K = head.out_dim, d = vit.embed_dim;
    auto images = smkd::testing::random_tensor<double>({V, 3, 8, 8}, rng);
    std::vector<MaskSpec> masks;
    std::vector<std::uint8_t> flat;
    for (std::size_t v = 0; v < V; ++v) {
      masks.push_back(sample_block_mask(2, 2, 0.5, rng));
      flat.insert(flat.end(), masks.back().grid.begin(), masks.back().grid.end());
    }
    auto center = CenterState<double>::zeros(K);
    TeacherBatch<double> tb;
    {
      StopGradient sg;
      auto out = forward(patchify(images, vit, teacher.backbone), vit, teacher.backbone, false);
      tb.cls_probs = teacher_distribution(project(out.cls, teacher.head), center, 0.07);
      tb.patch_probs =
          reshape(teacher_distribution(project(reshape(out.patches, {V * N, d}), teacher.head), center, 0.07), {V, N, K});
      tb.features = out.patches;
    }
    std::vector<ViewPair> pairs{{0, 1, 0, true, false}, {1, 0, 0, true, false}, {0, 2, 0, false, false},
                                {2, 0, 0, false, false}, {3, 3, 1, true, false}};
    Stage2Options o;
    o.lambda = 0.45;
    auto loss_fn = [&]() {
      auto tokens = apply_mask_tokens(patchify(images, vit, student.backbone), std::span<const std::uint8_t>(flat),
                                      student.backbone.mask_token);
      auto out = forward(tokens, vit, student.backbone, false);
      StudentBatch<double> sb;
      sb.cls_probs = student_distribution(project(out.cls, student.head), 0.1);
      sb.patch_probs = reshape(student_distribution(project(reshape(out.patches, {V * N, d}), student.head), 0.1), {V, N, K});
      sb.features = out.patches.detach();
      return stage2_loss(tb, sb, pairs, o).total;
    };
    const auto grads = backward(loss_fn());
    std::vector<std::pair<Tensor64*, std::size_t>> entries;
    student.visit([&](const std::string&, Tensor64& t) {
      for (std::size_t i = 0; i < t.size(); ++i) entries.emplace_back(&t, i);
    });
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(std::max<std::size_t>(20, entries.size() / 100));
    double worst = 0;
    const double eps = 1e-5;
    for (auto [t, i] : entries) {
      const double analytic = grads.contains(*t) ? grads.at(*t).data()[i] : 0.0;
      auto w = t->mutable_data();
      const double x0 = w[i];
      w[i] = x0 + eps;
      const double up = loss_fn().item();
      w[i] = x0 - eps;
      const double down = loss_fn().item();
      w[i] = x0;
      const double numeric = (up - down) / (2 * eps);
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4}));
    }
    EXPECT_LT(worst, 1e-3) << "seed " << seed;
  }
}
