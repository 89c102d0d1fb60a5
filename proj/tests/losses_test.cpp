#include "smkd/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "smkd/error.hpp"
#include "test_util.hpp"

using namespace smkd;
using smkd::testing::random_distribution;
using smkd::testing::random_tensor;

namespace {

Tensor64 vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor64({n}, std::move(v));
}

ProbTable<double> table(Side side, Tensor64 cls, Tensor64 patches = {}) { return {cls, patches, side}; }

Tensor64 random_rows(std::size_t rows, std::size_t k, std::mt19937_64& rng) {
  std::vector<double> v;
  for (std::size_t r = 0; r < rows; ++r) {
    auto p = random_distribution(k, rng);
    v.insert(v.end(), p.begin(), p.end());
  }
  return Tensor64({rows, k}, std::move(v));
}

double ce(const double* p, const double* q, std::size_t k) {
  double s = 0;
  for (std::size_t j = 0; j < k; ++j) s -= p[j] * std::log(std::max(q[j], 1e-8));
  return s;
}

// Exhaustive cosine argmax, written independently of the library.
std::vector<std::size_t> brute_match(const std::vector<double>& t, const std::vector<double>& s, std::size_t n,
                                     std::size_t m, std::size_t d) {
  std::vector<std::size_t> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < m; ++l) {
      double dot = 0, nt = 0, ns = 0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += t[k * d + j] * s[l * d + j];
        nt += t[k * d + j] * t[k * d + j];
        ns += s[l * d + j] * s[l * d + j];
      }
      const double c = dot / (std::sqrt(nt) * std::sqrt(ns));
      if (c > best) {
        best = c;
        out[k] = l;
      }
    }
  }
  return out;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

struct Fixture {
  std::size_t V, L, N, K, D;
  TeacherBatch<double> teacher;
  StudentBatch<double> student;
  Tensor64 student_cls_logits, student_patch_logits;
};

Fixture make_fixture(std::mt19937_64& rng, std::size_t V, std::size_t L, std::size_t N, std::size_t K, std::size_t D) {
  Fixture f{V, L, N, K, D, {}, {}, {}, {}};
  f.teacher.cls_probs = random_rows(V, K, rng);
  f.teacher.patch_probs = reshape(random_rows(V * N, K, rng), {V, N, K});
  f.teacher.features = random_tensor<double>({V, N, D}, rng);
  std::vector<double> attn;
  for (std::size_t v = 0; v < V; ++v) {
    auto a = random_distribution(N, rng);
    attn.insert(attn.end(), a.begin(), a.end());
  }
  f.teacher.attn_weights = Tensor64({V, N}, attn);
  f.student_cls_logits = random_tensor<double>({V + L, K}, rng, -2, 2);
  f.student_patch_logits = random_tensor<double>({V, N, K}, rng, -2, 2);
  f.student.cls_probs = softmax(f.student_cls_logits, -1, 1.0);
  f.student.patch_probs = softmax(f.student_patch_logits, -1, 1.0);
  f.student.features = random_tensor<double>({V, N, D}, rng);
  return f;
}

std::vector<ViewPair> all_pairs(std::size_t V, std::size_t L) {
  std::vector<ViewPair> pairs;
  for (std::size_t t = 0; t < V; ++t)
    for (std::size_t s = 0; s < V + L; ++s) pairs.push_back({t, s, 0, t == s, s >= V});
  return pairs;
}

// Direct double-loop evaluation of the stage-2 objective.
double stage2_direct(const Fixture& f, const std::vector<ViewPair>& pairs, const Stage2Options& o) {
  const auto tc = f.teacher.cls_probs.to_vector(), tp = f.teacher.patch_probs.to_vector();
  const auto sc = f.student.cls_probs.to_vector(), sp = f.student.patch_probs.to_vector();
  const auto tf = f.teacher.features.to_vector(), sf = f.student.features.to_vector();
  const auto aw = f.teacher.attn_weights.to_vector();
  double total = 0;
  for (const auto& p : pairs) {
    double term = o.use_cls ? ce(&tc[p.teacher_view * f.K], &sc[p.student_view * f.K], f.K) : 0.0;
    if (o.use_patch && !p.local) {
      std::vector<double> t(tf.begin() + p.teacher_view * f.N * f.D, tf.begin() + (p.teacher_view + 1) * f.N * f.D);
      std::vector<double> s(sf.begin() + p.student_view * f.N * f.D, sf.begin() + (p.student_view + 1) * f.N * f.D);
      const auto kp = brute_match(t, s, f.N, f.N, f.D);
      double patch = 0;
      for (std::size_t k = 0; k < f.N; ++k) {
        const double w = o.weighting == PatchWeighting::uniform ? 1.0 / double(f.N) : aw[p.teacher_view * f.N + k];
        patch += w * ce(&tp[(p.teacher_view * f.N + k) * f.K], &sp[(p.student_view * f.N + kp[k]) * f.K], f.K);
      }
      term += o.lambda * patch;
    }
    total += term;
  }
  return total / double(pairs.size());
}

}  // namespace

// ---- cross_entropy_h -------------------------------------------------------

TEST(CrossEntropy, OneHotAgainstItselfIsZero) {
  EXPECT_DOUBLE_EQ(cross_entropy_h(vec({0, 1, 0}), vec({0, 1, 0})).item(), 0.0);
}

TEST(CrossEntropy, OneHotAgainstUniformIsLn2) {
  EXPECT_NEAR(cross_entropy_h(vec({1, 0}), vec({0.5, 0.5})).item(), 0.6931, 1e-4);
}

TEST(CrossEntropy, HandExample) {
  // -(0.7 ln 0.4 + 0.3 ln 0.6)
  const double expect = -(0.7 * std::log(0.4) + 0.3 * std::log(0.6));
  EXPECT_NEAR(cross_entropy_h(vec({0.7, 0.3}), vec({0.4, 0.6})).item(), expect, 1e-12);
  EXPECT_NEAR(expect, 0.7946, 1e-4);
}

TEST(CrossEntropy, NegativeEntryRejected) {
  EXPECT_THROW(cross_entropy_h(vec({1.2, -0.2}), vec({0.5, 0.5})), ParameterError);
  EXPECT_THROW(cross_entropy_h(vec({0.5, 0.5}), vec({-0.1, 1.1})), ParameterError);
  EXPECT_THROW(cross_entropy_h(vec({0.5, 0.5}), vec({0.2, 0.3, 0.5})), DimensionError);
}

TEST(CrossEntropy, ZeroStudentProbabilityIsClamped) {
  const double v = cross_entropy_h(vec({0.5, 0.5}), vec({1.0, 0.0})).item();
  EXPECT_NEAR(v, -0.5 * std::log(1e-8), 1e-9);
}

TEST(CrossEntropy, BoundedBelowByEntropy) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + trial % 9;
    auto p = random_distribution(k, rng), q = random_distribution(k, rng);
    double entropy = 0;
    for (double x : p) entropy -= x * std::log(x);
    const double h = cross_entropy_h(Tensor64({k}, p), Tensor64({k}, q)).item();
    EXPECT_GE(h, entropy - 1e-12);
    EXPECT_NEAR(cross_entropy_h(Tensor64({k}, p), Tensor64({k}, p)).item(), entropy, 1e-12);
  }
}

TEST(CrossEntropy, GradientOnlyThroughStudent) {
  std::mt19937_64 rng(3);
  Tensor64 p({4}, random_distribution(4, rng), true);
  Tensor64 logits = random_tensor<double>({4}, rng);
  logits.set_requires_grad(true);
  auto loss = cross_entropy_h(p, softmax(logits, 0, 1.0));
  auto grads = backward(loss);
  EXPECT_FALSE(grads.contains(p));
  ASSERT_TRUE(grads.contains(logits));
  // d/dz of -sum p log softmax(z) = softmax(z) - p
  auto q = softmax(logits.detach(), 0, 1.0);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(grads.at(logits)[j], q[j] - p[j], 1e-12);
}

// ---- loss_cls ---------------------------------------------------------------

TEST(LossCls, OneHotTablesGiveZero) {
  ViewPair pair{0, 1, 3, false, false};
  EXPECT_DOUBLE_EQ(loss_cls(pair, table(Side::teacher, vec({0, 0, 1})), table(Side::student, vec({0, 0, 1}))).item(),
                   0.0);
}

TEST(LossCls, SameImagePairMatchesSelfDistillationExactly) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = table(Side::teacher, Tensor64({8}, random_distribution(8, rng)));
    auto s = table(Side::student, Tensor64({8}, random_distribution(8, rng)));
    ViewPair pair{0, 1, 2, true, false};
    const double a = loss_cls_self(t, s).item(), b = loss_cls(pair, t, s).item();
    EXPECT_EQ(a, b);
  }
}

TEST(LossCls, EqualsCrossEntropyOfClsRows) {
  std::mt19937_64 rng(9);
  auto t = table(Side::teacher, Tensor64({6}, random_distribution(6, rng)));
  auto s = table(Side::student, Tensor64({6}, random_distribution(6, rng)));
  const auto tv = t.cls.to_vector(), sv = s.cls.to_vector();
  EXPECT_NEAR(loss_cls(ViewPair{}, t, s).item(), ce(tv.data(), sv.data(), 6), 1e-12);
}

TEST(LossCls, SideMismatchIsContractError) {
  auto a = table(Side::student, vec({0.5, 0.5}));
  auto b = table(Side::teacher, vec({0.5, 0.5}));
  EXPECT_THROW(loss_cls(ViewPair{}, a, b), ContractError);
  EXPECT_THROW(loss_cls_self(a, a), ContractError);
}

// ---- loss_mim ---------------------------------------------------------------

TEST(LossMim, EmptyMaskIsZero) {
  std::mt19937_64 rng(1);
  auto t = table(Side::teacher, {}, random_rows(16, 5, rng));
  auto s = table(Side::student, {}, random_rows(16, 5, rng));
  EXPECT_EQ(loss_mim(t, s, MaskSpec::none(16)).item(), 0.0);
  EXPECT_EQ(loss_mim(t, s, MaskSpec::none(16), false).item(), 0.0);
}

TEST(LossMim, SingleMaskedPatchEqualsItsCrossEntropy) {
  std::mt19937_64 rng(2);
  auto t = table(Side::teacher, {}, random_rows(9, 4, rng));
  auto s = table(Side::student, {}, random_rows(9, 4, rng));
  MaskSpec m = MaskSpec::none(9);
  m.grid[5] = 1;
  const auto tv = t.patches.to_vector(), sv = s.patches.to_vector();
  EXPECT_NEAR(loss_mim(t, s, m).item(), ce(&tv[20], &sv[20], 4), 1e-12);
}

TEST(LossMim, RandomMaskEqualsDirectSum) {
  std::mt19937_64 rng(4);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 4 + trial % 13, k = 3 + trial % 7;
    auto t = table(Side::teacher, {}, random_rows(n, k, rng));
    auto s = table(Side::student, {}, random_rows(n, k, rng));
    MaskSpec m = MaskSpec::none(n);
    for (auto& c : m.grid) c = coin(rng);
    const auto tv = t.patches.to_vector(), sv = s.patches.to_vector();
    double direct = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (m.grid[i]) {
        direct += ce(&tv[i * k], &sv[i * k], k);
        ++count;
      }
    EXPECT_LT(rel(loss_mim(t, s, m, false).item(), direct), 1e-6);
    if (count) EXPECT_LT(rel(loss_mim(t, s, m).item(), direct / double(count)), 1e-6);
  }
}

TEST(LossMim, UnnormalizedSumIsMonotoneInMask) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.5);
  auto t = table(Side::teacher, {}, random_rows(16, 8, rng));
  auto s = table(Side::student, {}, random_rows(16, 8, rng));
  MaskSpec full = MaskSpec::none(16);
  std::fill(full.grid.begin(), full.grid.end(), 1);
  const double full_loss = loss_mim(t, s, full, false).item();
  for (int trial = 0; trial < 100; ++trial) {
    MaskSpec sub = MaskSpec::none(16);
    for (auto& c : sub.grid) c = coin(rng);
    EXPECT_LE(loss_mim(t, s, sub, false).item(), full_loss + 1e-12);
  }
}

TEST(LossMim, MaskSizeMismatch) {
  std::mt19937_64 rng(7);
  auto t = table(Side::teacher, {}, random_rows(4, 3, rng));
  auto s = table(Side::student, {}, random_rows(4, 3, rng));
  EXPECT_THROW(loss_mim(t, s, MaskSpec::none(5)), DimensionError);
}

// ---- match_patches -----------------------------------------------------------

TEST(MatchPatches, SelfMatchIsIdentity) {
  std::mt19937_64 rng(8);
  auto f = random_tensor<double>({16, 32}, rng);
  auto mm = match_patches(f, f);
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_EQ(mm.k_plus[k], k);
    EXPECT_NEAR(mm.sims[k], 1.0, 1e-12);
  }
}

TEST(MatchPatches, SwappedBasisIsPermutation) {
  Tensor64 t({2, 2}, {1, 0, 0, 1});
  Tensor64 s({2, 2}, {0, 1, 1, 0});
  auto mm = match_patches(t, s);
  EXPECT_EQ(mm.k_plus, (std::vector<std::size_t>{1, 0}));
}

TEST(MatchPatches, TiesGoToLowestIndex) {
  Tensor64 t({1, 2}, {1, 0});
  Tensor64 s({3, 2}, {0, 1, 2, 0, 1, 0});
  EXPECT_EQ(match_patches(t, s).k_plus[0], 1u);
}

TEST(MatchPatches, EqualsBruteForceOn200Instances) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> nd(1, 16), dd(1, 32);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = nd(rng), d = dd(rng);
    auto t = random_tensor<double>({n, d}, rng), s = random_tensor<double>({n, d}, rng);
    auto mm = match_patches(t, s);
    EXPECT_EQ(mm.k_plus, brute_match(t.to_vector(), s.to_vector(), n, n, d)) << "trial " << trial;
    for (double c : mm.sims) {
      EXPECT_GE(c, -1.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(MatchPatches, InvariantToPositiveScaling) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_tensor<double>({10, 12}, rng), s = random_tensor<double>({10, 12}, rng);
    const auto base = match_patches(t, s).k_plus;
    EXPECT_EQ(match_patches(scale(t, 7.5), s).k_plus, base);
    EXPECT_EQ(match_patches(t, scale(s, 0.003)).k_plus, base);
  }
}

TEST(MatchPatches, ZeroRowsAreGuarded) {
  Tensor64 t = Tensor64::zeros({2, 3});
  Tensor64 s({2, 3}, {1, 0, 0, 0, 1, 0});
  auto mm = match_patches(t, s);
  EXPECT_EQ(mm.k_plus, (std::vector<std::size_t>{0, 0}));
  EXPECT_EQ(mm.sims[0], 0.0);
}

// ---- loss_patch ---------------------------------------------------------------

TEST(LossPatch, IdenticalOneHotsGiveZero) {
  Tensor64 oh({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  MatchMap mm{{0, 1, 2}, {1, 1, 1}};
  EXPECT_DOUBLE_EQ(loss_patch(table(Side::teacher, {}, oh), table(Side::student, {}, oh), mm).item(), 0.0);
}

TEST(LossPatch, SinglePatchEqualsCrossEntropy) {
  std::mt19937_64 rng(14);
  auto t = random_rows(1, 5, rng), s = random_rows(1, 5, rng);
  MatchMap mm{{0}, {1}};
  const auto tv = t.to_vector(), sv = s.to_vector();
  EXPECT_NEAR(loss_patch(table(Side::teacher, {}, t), table(Side::student, {}, s), mm).item(),
              ce(tv.data(), sv.data(), 5), 1e-12);
}

TEST(LossPatch, EqualsWeightedDirectSum) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 10, k = 4;
    auto t = random_rows(n, k, rng), s = random_rows(n, k, rng);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    MatchMap mm;
    for (std::size_t i = 0; i < n; ++i) mm.k_plus.push_back(pick(rng)), mm.sims.push_back(0);
    const auto w = random_distribution(n, rng);
    const auto tv = t.to_vector(), sv = s.to_vector();
    double direct = 0, uniform = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = ce(&tv[i * k], &sv[mm.k_plus[i] * k], k);
      direct += w[i] * h;
      uniform += h / double(n);
    }
    auto tt = table(Side::teacher, {}, t), st = table(Side::student, {}, s);
    EXPECT_LT(rel(loss_patch(tt, st, mm, w).item(), direct), 1e-6);
    EXPECT_LT(rel(loss_patch(tt, st, mm).item(), uniform), 1e-6);
  }
}

TEST(LossPatch, WeightsMustSumToOne) {
  std::mt19937_64 rng(16);
  auto t = table(Side::teacher, {}, random_rows(2, 3, rng));
  auto s = table(Side::student, {}, random_rows(2, 3, rng));
  MatchMap mm{{0, 1}, {1, 1}};
  std::vector<double> bad{0.3, 0.3};
  EXPECT_THROW(loss_patch(t, s, mm, bad), ParameterError);
}

// ---- stage aggregates -----------------------------------------------------------

TEST(Stage1, BatchedMatchesPerPairAndDirectSum) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = make_fixture(rng, 4, 2, 9, 6, 5);
    std::vector<ViewPair> pairs;
    // two images with two views each, cross-view pairs plus local crops
    for (std::size_t img = 0; img < 2; ++img)
      for (std::size_t a = 0; a < 2; ++a) {
        pairs.push_back({img * 2 + a, img * 2 + (1 - a), 0, true, false});
        pairs.push_back({img * 2 + a, 4 + img, 0, true, true});
      }
    std::vector<MaskSpec> masks;
    std::bernoulli_distribution coin(0.4);
    for (std::size_t v = 0; v < 4; ++v) {
      MaskSpec m = MaskSpec::none(9);
      for (auto& c : m.grid) c = coin(rng);
      masks.push_back(m);
    }
    auto terms = stage1_loss(f.teacher, f.student, pairs, masks);
    const double by_pairs = stage1_loss_by_pairs(f.teacher, f.student, pairs, masks).item();
    EXPECT_LT(rel(terms.total.item(), by_pairs), 1e-6);
    EXPECT_LT(rel(terms.total.item(), terms.cls + terms.mim), 1e-12);

    const auto tc = f.teacher.cls_probs.to_vector(), sc = f.student.cls_probs.to_vector();
    const auto tp = f.teacher.patch_probs.to_vector(), sp = f.student.patch_probs.to_vector();
    double cls = 0;
    for (const auto& p : pairs) cls += ce(&tc[p.teacher_view * 6], &sc[p.student_view * 6], 6);
    cls /= double(pairs.size());
    double mim = 0;
    for (std::size_t v = 0; v < 4; ++v) {
      double s = 0;
      for (std::size_t i = 0; i < 9; ++i)
        if (masks[v].grid[i]) s += ce(&tp[(v * 9 + i) * 6], &sp[(v * 9 + i) * 6], 6);
      mim += s / double(std::max<std::size_t>(1, masks[v].popcount()));
    }
    mim /= 4.0;
    EXPECT_LT(rel(terms.cls, cls), 1e-6);
    EXPECT_LT(rel(terms.mim, mim), 1e-6);
  }
}

TEST(Stage1, EmptyMasksReduceToClsTerm) {
  std::mt19937_64 rng(18);
  auto f = make_fixture(rng, 2, 0, 4, 5, 3);
  std::vector<ViewPair> pairs{{0, 1, 0, true, false}, {1, 0, 0, true, false}};
  std::vector<MaskSpec> masks(2, MaskSpec::none(4));
  auto terms = stage1_loss(f.teacher, f.student, pairs, masks);
  EXPECT_EQ(terms.mim, 0.0);
  EXPECT_EQ(terms.total.item(), terms.cls);
}

TEST(Stage2, BatchedMatchesPerPairAndDirectSum) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = make_fixture(rng, 4, 2, 9, 6, 5);
    const auto pairs = all_pairs(4, 2);
    for (auto weighting : {PatchWeighting::uniform, PatchWeighting::attention}) {
      Stage2Options o;
      o.lambda = 0.45;
      o.weighting = weighting;
      auto terms = stage2_loss(f.teacher, f.student, pairs, o);
      const double by_pairs = stage2_loss_by_pairs(f.teacher, f.student, pairs, o).item();
      const double direct = stage2_direct(f, pairs, o);
      EXPECT_LT(rel(terms.total.item(), by_pairs), 1e-6);
      EXPECT_LT(rel(terms.total.item(), direct), 1e-6);
      EXPECT_LT(rel(terms.total.item(), terms.cls + o.lambda * terms.patch), 1e-10);
    }
  }
}

TEST(Stage2, LambdaZeroTotalEqualsClsComponent) {
  std::mt19937_64 rng(20);
  auto f = make_fixture(rng, 3, 0, 4, 5, 3);
  Stage2Options o;
  o.lambda = 0.0;
  auto terms = stage2_loss(f.teacher, f.student, all_pairs(3, 0), o);
  EXPECT_EQ(terms.total.item(), terms.cls);
  EXPECT_GT(terms.patch, 0.0);
}

TEST(Stage2, SinglePairIsComponentSum) {
  std::mt19937_64 rng(21);
  auto f = make_fixture(rng, 2, 0, 4, 5, 3);
  std::vector<ViewPair> pairs{{0, 1, 0, false, false}};
  Stage2Options o;
  o.lambda = 0.25;
  auto terms = stage2_loss(f.teacher, f.student, pairs, o);
  const auto t = teacher_table(f.teacher, 0);
  const auto s = student_table(f.student, 1);
  const auto tf = reshape(slice(f.teacher.features, 0, 0, 1), {4, 3});
  const auto sf = reshape(slice(f.student.features, 0, 1, 1), {4, 3});
  const double expect = loss_cls(pairs[0], t, s).item() + 0.25 * loss_patch(t, s, match_patches(tf, sf)).item();
  EXPECT_LT(rel(terms.total.item(), expect), 1e-12);
}

TEST(Stage2, ComponentSwitches) {
  std::mt19937_64 rng(22);
  auto f = make_fixture(rng, 2, 1, 4, 5, 3);
  const auto pairs = all_pairs(2, 1);
  Stage2Options cls_only{0.45, true, false, PatchWeighting::uniform};
  Stage2Options patch_only{0.45, false, true, PatchWeighting::uniform};
  auto a = stage2_loss(f.teacher, f.student, pairs, cls_only);
  auto b = stage2_loss(f.teacher, f.student, pairs, patch_only);
  EXPECT_LT(rel(a.total.item(), a.cls), 1e-12);
  EXPECT_LT(rel(b.total.item(), 0.45 * b.patch), 1e-12);
  EXPECT_LT(rel(b.total.item(), stage2_direct(f, pairs, patch_only)), 1e-6);
}

TEST(Stage2, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(23);
  for (int seed = 0; seed < 10; ++seed) {
    auto f = make_fixture(rng, 2, 1, 4, 5, 3);
    const auto pairs = all_pairs(2, 1);
    Stage2Options o;
    auto via_patch_logits = [&](const Tensor64& z) {
      StudentBatch<double> s = f.student;
      s.patch_probs = softmax(z, -1, 0.5);
      return stage2_loss(f.teacher, s, pairs, o).total;
    };
    auto via_cls_logits = [&](const Tensor64& z) {
      StudentBatch<double> s = f.student;
      s.cls_probs = softmax(z, -1, 0.5);
      return stage2_loss(f.teacher, s, pairs, o).total;
    };
    EXPECT_LT(finite_diff_check<double>(via_patch_logits, f.student_patch_logits, 1e-5), 1e-5);
    EXPECT_LT(finite_diff_check<double>(via_cls_logits, f.student_cls_logits, 1e-5), 1e-5);
  }
}

TEST(Stage1, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(24);
  for (int seed = 0; seed < 10; ++seed) {
    auto f = make_fixture(rng, 2, 0, 4, 5, 3);
    std::vector<ViewPair> pairs{{0, 1, 0, true, false}, {1, 0, 0, true, false}};
    std::vector<MaskSpec> masks(2, MaskSpec::none(4));
    masks[0].grid[1] = masks[0].grid[2] = masks[1].grid[3] = 1;
    auto fn = [&](const Tensor64& z) {
      StudentBatch<double> s = f.student;
      s.patch_probs = softmax(z, -1, 0.5);
      return stage1_loss(f.teacher, s, pairs, masks).total;
    };
    EXPECT_LT(finite_diff_check<double>(fn, f.student_patch_logits, 1e-5), 1e-5);
  }
}

TEST(Stage2, NoGradientReachesTeacherSide) {
  std::mt19937_64 rng(25);
  auto f = make_fixture(rng, 2, 0, 4, 5, 3);
  Tensor64 teacher_logits = random_tensor<double>({2, 4, 5}, rng);
  teacher_logits.set_requires_grad(true);
  {
    StopGradient sg;
    f.teacher.patch_probs = softmax(teacher_logits, -1, 0.07);
  }
  f.student_patch_logits.set_requires_grad(true);
  f.student.patch_probs = softmax(f.student_patch_logits, -1, 0.1);
  auto grads = backward(stage2_loss(f.teacher, f.student, all_pairs(2, 0), Stage2Options{}).total);
  EXPECT_FALSE(grads.contains(teacher_logits));
  EXPECT_TRUE(grads.contains(f.student_patch_logits));
}
