#pragma once

// Distillation objectives: masked self-distillation on [cls] tokens, masked
// image modeling on patches, supervised intra-class [cls] distillation, and
// cosine-matched patch distillation, plus their stage-level aggregates.
//
// Two routes are provided. The per-pair functions (loss_cls, loss_mim,
// loss_patch) operate on single-view ProbTables and mirror the formulas term
// by term. The stage aggregates fold all pairs of a batch into constant target
// matrices and evaluate one weighted log-likelihood per stage.

#include <cstdint>
#include <span>
#include <vector>

#include "smkd/masking.hpp"
#include "smkd/tensor.hpp"

namespace smkd {

/// Lower clamp applied to student probabilities inside log.
inline constexpr double kProbFloor = 1e-8;

enum class Side { teacher, student };

template <typename T>
struct ProbTable {
  BasicTensor<T> cls;      // [K]
  BasicTensor<T> patches;  // [N, K]
  Side side = Side::student;
};

/// One distillation pair inside a batch of augmented views. Indices refer to
/// the batch's view arrays: teacher views are uncorrupted, student views are
/// masked (or local crops, which only enter the [cls] term).
struct ViewPair {
  std::size_t teacher_view = 0;
  std::size_t student_view = 0;
  int label = 0;
  bool same_image = false;
  bool local = false;
};

/// Teacher patch k is matched to student patch k_plus[k] with cosine sims[k].
struct MatchMap {
  std::vector<std::size_t> k_plus;
  std::vector<double> sims;
};

enum class PatchWeighting { uniform, attention };

/// H(p, q) = -sum p log max(q, floor). Gradient flows only through q.
template <typename T>
BasicTensor<T> cross_entropy_h(const BasicTensor<T>& p, const BasicTensor<T>& q);

/// Self-distillation across two views of one image: H(P_t(x1).cls, P_s(x2).cls).
template <typename T>
BasicTensor<T> loss_cls_self(const ProbTable<T>& teacher_view1, const ProbTable<T>& student_view2);

/// Supervised [cls] distillation for an intra-class pair.
template <typename T>
BasicTensor<T> loss_cls(const ViewPair& pair, const ProbTable<T>& teacher, const ProbTable<T>& student);

/// Masked-patch distillation between the uncorrupted and masked view of one
/// image. With `normalize`, the masked sum is divided by max(1, |mask|).
template <typename T>
BasicTensor<T> loss_mim(const ProbTable<T>& teacher, const ProbTable<T>& student, const MaskSpec& mask,
                        bool normalize = true);

/// For each teacher patch, the student patch of highest cosine similarity
/// (masked student positions included). Ties resolve to the lowest index.
template <typename T>
MatchMap match_patches(const BasicTensor<T>& teacher_feats, const BasicTensor<T>& student_feats);

/// sum_k w_k H(P_t.patches[k], P_s.patches[k_plus[k]]). An empty weight span
/// means w_k = 1/N. Weights are indexed by teacher patch and must sum to one.
template <typename T>
BasicTensor<T> loss_patch(const ProbTable<T>& teacher, const ProbTable<T>& student, const MatchMap& matches,
                          std::span<const double> weights = {});

// ---- batch-level aggregation ----------------------------------------------

/// Teacher outputs for V views. All fields are constants.
template <typename T>
struct TeacherBatch {
  BasicTensor<T> cls_probs;    // [V, K]
  BasicTensor<T> patch_probs;  // [V, N, K]
  BasicTensor<T> features;     // [V, N, d] final backbone patch tokens
  BasicTensor<T> attn_weights; // [V, N] cls attention weights; optional
};

/// Student outputs for V global views plus L local crops.
template <typename T>
struct StudentBatch {
  BasicTensor<T> cls_probs;    // [V + L, K]
  BasicTensor<T> patch_probs;  // [V, N, K]
  BasicTensor<T> features;     // [V, N, d], used for matching only
};

template <typename T>
struct LossTerms {
  BasicTensor<T> total;
  double cls = 0, patch = 0, mim = 0, ce = 0;
};

/// Per-view tables sliced out of a batch.
template <typename T>
ProbTable<T> teacher_table(const TeacherBatch<T>& batch, std::size_t view);
template <typename T>
ProbTable<T> student_table(const StudentBatch<T>& batch, std::size_t view);

/// Stage-1 objective: mean over cross-view [cls] pairs (plus local-crop pairs)
/// of the self-distillation loss, plus the mean over global views of L_MIM.
/// Global view v belongs to image v / views_per_image.
template <typename T>
LossTerms<T> stage1_loss(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                         std::span<const ViewPair> cls_pairs, std::span<const MaskSpec> masks,
                         bool normalize_mim = true);

struct Stage2Options {
  double lambda = 0.45;
  bool use_cls = true;
  bool use_patch = true;
  PatchWeighting weighting = PatchWeighting::uniform;
};

/// Stage-2 objective: mean over view pairs of use_cls * L_cls + lambda *
/// use_patch * L_patch. Local pairs contribute to the [cls] term only. Patch
/// tables may be left undefined when use_patch is false.
template <typename T>
LossTerms<T> stage2_loss(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                         std::span<const ViewPair> pairs, const Stage2Options& options);

/// Reference evaluation of stage2_loss through the per-pair functions.
template <typename T>
BasicTensor<T> stage2_loss_by_pairs(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                                    std::span<const ViewPair> pairs, const Stage2Options& options);

/// Reference evaluation of stage1_loss through the per-pair functions.
template <typename T>
BasicTensor<T> stage1_loss_by_pairs(const TeacherBatch<T>& teacher, const StudentBatch<T>& student,
                                    std::span<const ViewPair> cls_pairs, std::span<const MaskSpec> masks,
                                    bool normalize_mim = true);

/// Mean softmax cross-entropy of logits [M, C] against integer labels.
template <typename T>
BasicTensor<T> classification_ce(const BasicTensor<T>& logits, std::span<const int> labels);

}  // namespace smkd
