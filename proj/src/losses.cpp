#include "smkd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "smkd/error.hpp"

namespace smkd {

namespace {

template <typename T>
void require_sides(const ProbTable<T>& teacher, const ProbTable<T>& student) {
  if (teacher.side != Side::teacher || student.side != Side::student)
    throw ContractError("loss expects (teacher, student) tables in that order");
}

template <typename T>
void require_nonnegative(const BasicTensor<T>& x, const char* what) {
  for (T v : x.data())
    if (v < T(0)) throw ParameterError(std::string("cross_entropy_h: negative entry in ") + what);
}

// Negative weighted log-likelihood -sum(w * log max(q, floor)) with constant w.
template <typename T>
BasicTensor<T> weighted_nll(const BasicTensor<T>& weights, const BasicTensor<T>& q) {
  return scale(sum(mul(log(q, static_cast<T>(kProbFloor)), weights)), T(-1));
}

template <typename T>
std::vector<double> normalized_rows(const T* data, std::size_t rows, std::size_t d) {
  std::vector<double> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += double(data[r * d + j]) * double(data[r * d + j]);
    // Divide rather than multiply by a reciprocal: x / |x| is exactly +-1 in
    // one dimension, so mathematically tied cosines stay tied.
    const double norm = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = double(data[r * d + j]) / norm;
  }
  return out;
}

// Argmax cosine over pre-normalized rows.
MatchMap match_normalized(const double* t, const double* s, std::size_t n, std::size_t m, std::size_t d) {
  MatchMap mm;
  mm.k_plus.resize(n);
  mm.sims.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t l = 0; l < m; ++l) {
      double c = 0;
      for (std::size_t j = 0; j < d; ++j) c += t[k * d + j] * s[l * d + j];
      if (c > best) {
        best = c;
        arg = l;
      }
    }
    mm.k_plus[k] = arg;
    mm.sims[k] = std::clamp(best, -1.0, 1.0);
  }
  return mm;
}

template <typename T>
std::vector<double> patch_weights(const TeacherBatch<T>& teacher, std::size_t view, std::size_t n,
                                  PatchWeighting weighting) {
  if (weighting == PatchWeighting::uniform) return std::vector<double>(n, 1.0 / double(n));
  if (!teacher.attn_weights.defined())
    throw ContractError("attention-weighted patch loss requires teacher attention weights");
  std::vector<double> w(n);
  for (std::size_t k = 0; k < n; ++k) w[k] = teacher.attn_weights[view * n + k];
  return w;
}

void check_weights(std::span<const double> w) {
  double total = 0;
  for (double v : w) {
    if (v < 0) throw ParameterError("patch weights must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-4) throw ParameterError("patch weights must sum to 1, got " + std::to_string(total));
}

}  // namespace

template <typename T>
BasicTensor<T> cross_entropy_h(const BasicTensor<T>& p, const BasicTensor<T>& q) {
  if (p.shape() != q.shape())
    throw DimensionError("cross_entropy_h: " + shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  require_nonnegative(p, "p");
  require_nonnegative(q, "q");
  return weighted_nll(p.detach(), q);
}

template <typename T>
BasicTensor<T> loss_cls_self(const ProbTable<T>& teacher_view1, const ProbTable<T>& student_view2) {
  require_sides(teacher_view1, student_view2);
  return cross_entropy_h(teacher_view1.cls, student_view2.cls);
}

template <typename T>
BasicTensor<T> loss_cls(const ViewPair&, const ProbTable<T>& teacher, const ProbTable<T>& student) {
  require_sides(teacher, student);
  return cross_entropy_h(teacher.cls, student.cls);
}

template <typename T>
BasicTensor<T> loss_mim(const ProbTable<T>& teacher, const ProbTable<T>& student, const MaskSpec& mask,
                        bool normalize) {
  require_sides(teacher, student);
  const auto& tp = teacher.patches;
  if (tp.shape() != student.patches.shape() || tp.rank() != 2 || mask.size() != tp.dim(0))
    throw DimensionError("loss_mim: tables " + shape_string(tp.shape()) + " / " +
                         shape_string(student.patches.shape()) + " with mask of " + std::to_string(mask.size()));
  const std::size_t n = tp.dim(0), k = tp.dim(1);
  const double denom = normalize ? double(std::max<std::size_t>(1, mask.popcount())) : 1.0;
  std::vector<T> w(n * k, T(0));
  for (std::size_t i = 0; i < n; ++i)
    if (mask.grid[i])
      for (std::size_t j = 0; j < k; ++j) w[i * k + j] = static_cast<T>(double(tp[i * k + j]) / denom);
  return weighted_nll(BasicTensor<T>({n, k}, std::move(w)), student.patches);
}

template <typename T>
MatchMap match_patches(const BasicTensor<T>& teacher_feats, const BasicTensor<T>& student_feats) {
  if (teacher_feats.rank() != 2 || student_feats.rank() != 2 || teacher_feats.dim(1) != student_feats.dim(1))
    throw DimensionError("match_patches: " + shape_string(teacher_feats.shape()) + " vs " +
                         shape_string(student_feats.shape()));
  const std::size_t n = teacher_feats.dim(0), m = student_feats.dim(0), d = teacher_feats.dim(1);
  const auto t = normalized_rows(teacher_feats.data().data(), n, d);
  const auto s = normalized_rows(student_feats.data().data(), m, d);
  return match_normalized(t.data(), s.data(), n, m, d);
}

template <typename T>
BasicTensor<T> loss_patch(const ProbTable<T>& teacher, const ProbTable<T>& student, const MatchMap& matches,
                          std::span<const double> weights) {
  require_sides(teacher, student);
  const auto& tp = teacher.patches;
  if (tp.rank() != 2 || student.patches.rank() != 2 || tp.dim(1) != student.patches.dim(1))
    throw DimensionError("loss_patch: incompatible tables");
  const std::size_t n = tp.dim(0), k = tp.dim(1);
  if (matches.k_plus.size() != n) throw DimensionError("loss_patch: match map size differs from teacher patches");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(n, 1.0 / double(n));
  if (w.size() != n) throw DimensionError("loss_patch: weight vector length differs from N");
  check_weights(w);
  std::vector<T> tw(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) tw[i * k + j] = static_cast<T>(w[i] * double(tp[i * k + j]));
  auto matched = embedding(student.patches, std::span<const std::size_t>(matches.k_plus));
  return weighted_nll(BasicTensor<T>({n, k}, std::move(tw)), matched);
}

// ---- batch-level ----------------------------------------------------------

template <typename T>
ProbTable<T> teacher_table(const TeacherBatch<T>& b, std::size_t v) {
  ProbTable<T> t;
  t.side = Side::teacher;
  const std::size_t k = b.cls_probs.dim(1);
  t.cls = reshape(slice(b.cls_probs, 0, v, 1), {k});
  t.patches = reshape(slice(b.patch_probs, 0, v, 1), {b.patch_probs.dim(1), k});
  return t;
}

template <typename T>
ProbTable<T> student_table(const StudentBatch<T>& b, std::size_t v) {
  ProbTable<T> t;
  t.side = Side::student;
  const std::size_t k = b.cls_probs.dim(1);
  t.cls = reshape(slice(b.cls_probs, 0, v, 1), {k});
  if (b.patch_probs.defined() && v < b.patch_probs.dim(0))
    t.patches = reshape(slice(b.patch_probs, 0, v, 1), {b.patch_probs.dim(1), k});
  return t;
}

namespace {

template <typename T>
void check_batches(const TeacherBatch<T>& t, const StudentBatch<T>& s) {
  if (t.cls_probs.rank() != 2 || s.cls_probs.rank() != 2 || t.cls_probs.dim(1) != s.cls_probs.dim(1))
    throw DimensionError("stage loss: cls probability tables disagree");
  if (t.patch_probs.defined() != s.patch_probs.defined() ||
      (s.patch_probs.defined() && t.patch_probs.shape() != s.patch_probs.shape()))
    throw DimensionError("stage loss: patch probability tables disagree: " + shape_string(t.patch_probs.shape()) +
                         " vs " + shape_string(s.patch_probs.shape()));
}

// Accumulates the [cls] target matrix: row s gains (scale * P_t.cls[t]).
template <typename T>
void add_cls_targets(std::vector<double>& w, const TeacherBatch<T>& t, std::span<const ViewPair> pairs, double scale_by,
                     std::size_t student_rows) {
  const std::size_t k = t.cls_probs.dim(1);
  for (const auto& p : pairs) {
    if (p.teacher_view >= t.cls_probs.dim(0) || p.student_view >= student_rows)
      throw DimensionError("view pair index out of range");
    for (std::size_t j = 0; j < k; ++j) w[p.student_view * k + j] += scale_by * double(t.cls_probs[p.teacher_view * k + j]);
  }
}

template <typename T>
double weighted_nll_value(const std::vector<double>& w, const BasicTensor<T>& q) {
  double total = 0;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] != 0.0) total -= w[i] * std::log(std::max(double(q[i]), kProbFloor));
  return total;
}

template <typename T>
BasicTensor<T> to_tensor(const std::vector<double>& w, const Shape& shape) {
  return BasicTensor<T>(shape, std::vector<T>(w.begin(), w.end()));
}

}  // namespace

template <typename T>
LossTerms<T> stage1_loss(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                         std::span<const ViewPair> cls_pairs, std::span<const MaskSpec> masks, bool normalize_mim) {
  check_batches(teacher, student);
  if (cls_pairs.empty()) throw ContractError("stage1_loss: no [cls] pairs");
  const std::size_t rows = student.cls_probs.dim(0), k = student.cls_probs.dim(1);
  const std::size_t views = teacher.patch_probs.dim(0), n = teacher.patch_probs.dim(1);
  if (masks.size() != views) throw DimensionError("stage1_loss: one mask per global view required");

  std::vector<double> wc(rows * k, 0.0);
  add_cls_targets(wc, teacher, cls_pairs, 1.0 / double(cls_pairs.size()), rows);

  std::vector<double> wm(views * n * k, 0.0);
  for (std::size_t v = 0; v < views; ++v) {
    if (masks[v].size() != n) throw DimensionError("stage1_loss: mask size differs from patch count");
    const double denom = (normalize_mim ? double(std::max<std::size_t>(1, masks[v].popcount())) : 1.0) * double(views);
    for (std::size_t i = 0; i < n; ++i) {
      if (!masks[v].grid[i]) continue;
      const std::size_t off = (v * n + i) * k;
      for (std::size_t j = 0; j < k; ++j) wm[off + j] = double(teacher.patch_probs[off + j]) / denom;
    }
  }
  LossTerms<T> out;
  auto lc = weighted_nll(to_tensor<T>(wc, {rows, k}), student.cls_probs);
  auto lm = weighted_nll(to_tensor<T>(wm, {views, n, k}), student.patch_probs);
  out.total = add(lc, lm);
  out.cls = lc.item();
  out.mim = lm.item();
  return out;
}

template <typename T>
LossTerms<T> stage2_loss(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                         std::span<const ViewPair> pairs, const Stage2Options& opt) {
  check_batches(teacher, student);
  if (pairs.empty()) throw ContractError("stage2_loss: no pairs");
  const std::size_t rows = student.cls_probs.dim(0), k = student.cls_probs.dim(1);
  const double inv_p = 1.0 / double(pairs.size());

  std::vector<double> wc(rows * k, 0.0);
  add_cls_targets(wc, teacher, pairs, inv_p, rows);

  LossTerms<T> out;
  BasicTensor<T> total;
  auto accumulate = [&](BasicTensor<T> term) { total = total.defined() ? add(total, term) : term; };
  if (!student.patch_probs.defined()) {
    if (opt.use_patch) throw ContractError("stage2_loss: patch term requested without patch tables");
    out.cls = weighted_nll_value(wc, student.cls_probs);
    if (opt.use_cls) {
      total = weighted_nll(to_tensor<T>(wc, {rows, k}), student.cls_probs);
      out.cls = total.item();
    } else {
      total = scale(sum(student.cls_probs), T(0));
    }
    out.total = total;
    return out;
  }

  const std::size_t views = student.patch_probs.dim(0), n = student.patch_probs.dim(1);
  std::vector<double> wp(views * n * k, 0.0);
  const std::size_t d = teacher.features.dim(2);
  const auto tf = normalized_rows(teacher.features.data().data(), teacher.features.dim(0) * n, d);
  const auto sf = normalized_rows(student.features.data().data(), views * n, d);
  for (const auto& p : pairs) {
    if (p.local) continue;
    if (p.student_view >= views) throw DimensionError("stage2_loss: global pair indexes a local crop");
    const MatchMap mm = match_normalized(tf.data() + p.teacher_view * n * d, sf.data() + p.student_view * n * d, n, n, d);
    const auto w = patch_weights(teacher, p.teacher_view, n, opt.weighting);
    check_weights(w);
    for (std::size_t kk = 0; kk < n; ++kk) {
      const double c = inv_p * w[kk];
      const std::size_t src = (p.teacher_view * n + kk) * k, dst = (p.student_view * n + mm.k_plus[kk]) * k;
      for (std::size_t j = 0; j < k; ++j) wp[dst + j] += c * double(teacher.patch_probs[src + j]);
    }
  }

  out.cls = weighted_nll_value(wc, student.cls_probs);
  out.patch = weighted_nll_value(wp, student.patch_probs);
  if (opt.use_cls) {
    auto lc = weighted_nll(to_tensor<T>(wc, {rows, k}), student.cls_probs);
    out.cls = lc.item();
    accumulate(lc);
  }
  if (opt.use_patch && opt.lambda != 0.0) {
    for (auto& v : wp) v *= opt.lambda;
    accumulate(weighted_nll(to_tensor<T>(wp, {views, n, k}), student.patch_probs));
  }
  if (!total.defined()) total = scale(sum(student.cls_probs), T(0));
  out.total = total;
  return out;
}

template <typename T>
BasicTensor<T> stage2_loss_by_pairs(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                                    std::span<const ViewPair> pairs, const Stage2Options& opt) {
  BasicTensor<T> total;
  for (const auto& p : pairs) {
    const auto t = teacher_table(teacher, p.teacher_view);
    const auto s = student_table(student, p.student_view);
    BasicTensor<T> term = scale(loss_cls(p, t, s), T(opt.use_cls ? 1 : 0));
    if (opt.use_patch && !p.local) {
      const auto tf = reshape(slice(teacher.features, 0, p.teacher_view, 1),
                              {teacher.features.dim(1), teacher.features.dim(2)});
      const auto sf = reshape(slice(student.features, 0, p.student_view, 1),
                              {student.features.dim(1), student.features.dim(2)});
      const MatchMap mm = match_patches(tf, sf);
      const auto w = patch_weights(teacher, p.teacher_view, tf.dim(0), opt.weighting);
      term = add(term, scale(loss_patch(t, s, mm, w), static_cast<T>(opt.lambda)));
    }
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, T(1) / T(pairs.size()));
}

template <typename T>
BasicTensor<T> stage1_loss_by_pairs(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                                    std::span<const ViewPair> cls_pairs, std::span<const MaskSpec> masks,
                                    bool normalize_mim) {
  BasicTensor<T> cls;
  for (const auto& p : cls_pairs) {
    auto term = loss_cls_self(teacher_table(teacher, p.teacher_view), student_table(student, p.student_view));
    cls = cls.defined() ? add(cls, term) : term;
  }
  BasicTensor<T> mim;
  for (std::size_t v = 0; v < masks.size(); ++v) {
    auto term = loss_mim(teacher_table(teacher, v), student_table(student, v), masks[v], normalize_mim);
    mim = mim.defined() ? add(mim, term) : term;
  }
  return add(scale(cls, T(1) / T(cls_pairs.size())), scale(mim, T(1) / T(masks.size())));
}

template <typename T>
BasicTensor<T> classification_ce(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("classification_ce: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  std::vector<T> w(m * c, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw DimensionError("classification_ce: label " + std::to_string(labels[i]) + " out of range");
    w[i * c + static_cast<std::size_t>(labels[i])] = T(1) / T(m);
  }
  return weighted_nll(BasicTensor<T>({m, c}, std::move(w)), softmax(logits, -1, T(1)));
}

#define SMKD_INSTANTIATE(T)                                                                                     \
  template BasicTensor<T> cross_entropy_h(const BasicTensor<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> loss_cls_self(const ProbTable<T>&, const ProbTable<T>&);                              \
  template BasicTensor<T> loss_cls(const ViewPair&, const ProbTable<T>&, const ProbTable<T>&);                  \
  template BasicTensor<T> loss_mim(const ProbTable<T>&, const ProbTable<T>&, const MaskSpec&, bool);            \
  template MatchMap match_patches(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> loss_patch(const ProbTable<T>&, const ProbTable<T>&, const MatchMap&,                 \
                                     std::span<const double>);                                                  \
  template ProbTable<T> teacher_table(const TeacherBatch<T>&, std::size_t);                                     \
  template ProbTable<T> student_table(const StudentBatch<T>&, std::size_t);                                     \
  template LossTerms<T> stage1_loss(const TeacherBatch<T>&, const StudentBatch<T>&, std::span<const ViewPair>,  \
                                    std::span<const MaskSpec>, bool);                                           \
  template LossTerms<T> stage2_loss(const TeacherBatch<T>&, const StudentBatch<T>&, std::span<const ViewPair>,  \
                                    const Stage2Options&);                                                      \
  template BasicTensor<T> stage2_loss_by_pairs(const TeacherBatch<T>&, const StudentBatch<T>&,                  \
                                               std::span<const ViewPair>, const Stage2Options&);                \
  template BasicTensor<T> stage1_loss_by_pairs(const TeacherBatch<T>&, const StudentBatch<T>&,                  \
                                               std::span<const ViewPair>, std::span<const MaskSpec>, bool);    \
  template BasicTensor<T> classification_ce(const BasicTensor<T>&, std::span<const int>);

SMKD_INSTANTIATE(float)
SMKD_INSTANTIATE(double)

#undef SMKD_INSTANTIATE

}  // namespace smkd
