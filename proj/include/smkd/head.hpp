#pragma once

// Projection head shared by [cls] and [patch] tokens: 3-layer GELU MLP, an
// l2-normalized bottleneck, and a weight-normalized K-way output layer.

#include <functional>
#include <string>

#include "smkd/random.hpp"
#include "smkd/tensor.hpp"

namespace smkd {

struct HeadConfig {
  std::size_t in_dim = 64;
  std::size_t hidden_dim = 256;
  std::size_t bottleneck_dim = 64;
  std::size_t out_dim = 256;  // K
  double student_temp = 0.1;
  double teacher_temp = 0.07;
  double warmup_teacher_temp = 0.04;
  std::size_t warmup_teacher_temp_epochs = 0;
  double center_momentum = 0.9;

  void validate() const;
};

template <typename T>
struct HeadParams {
  BasicTensor<T> fc1_w, fc1_b;
  BasicTensor<T> fc2_w, fc2_b;
  BasicTensor<T> fc3_w, fc3_b;
  BasicTensor<T> last_v;  // [K, bottleneck]; rows are normalized before use

  void visit(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
};

template <typename T>
HeadParams<T> init_head(const HeadConfig& cfg, Rng& rng, bool requires_grad = true);

template <typename T>
struct Projection {
  BasicTensor<T> bottleneck;  // [..., bottleneck], unit rows
  BasicTensor<T> logits;      // [..., K]
};

/// Maps tokens [..., d] to logits [..., K]. The same parameters serve [cls]
/// and [patch] tokens.
template <typename T>
Projection<T> project_full(const BasicTensor<T>& tokens, const HeadParams<T>& params);
template <typename T>
BasicTensor<T> project(const BasicTensor<T>& tokens, const HeadParams<T>& params) {
  return project_full(tokens, params).logits;
}

/// Running mean of teacher logits, subtracted before sharpening.
template <typename T>
struct CenterState {
  BasicTensor<T> center;  // [K]
  static CenterState zeros(std::size_t k) { return {BasicTensor<T>::zeros({k})}; }
};

/// softmax((logits - center) / teacher_temp), evaluated as a stop-gradient
/// constant. logits may be [K] or [M, K].
template <typename T>
BasicTensor<T> teacher_distribution(const BasicTensor<T>& logits, const CenterState<T>& cs, double teacher_temp);

/// softmax(logits / student_temp); differentiable.
template <typename T>
BasicTensor<T> student_distribution(const BasicTensor<T>& logits, double student_temp);

/// center <- m * center + (1 - m) * mean over rows of batch_teacher_logits [B, K].
template <typename T>
CenterState<T> update_center(const CenterState<T>& cs, const BasicTensor<T>& batch_teacher_logits, double momentum);

}  // namespace smkd
