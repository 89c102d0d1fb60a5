#pragma once

// Dense row-major tensors with a tape-free reverse-mode differentiation graph.
//
// Every op records (parents, backward closure) on its result when gradient
// recording is enabled and at least one input requires a gradient. The graph
// is owned by the result tensors through shared pointers and disappears with
// them. Two scalar types are instantiated: float for training and double for
// gradient-check suites.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "smkd/error.hpp"

namespace smkd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

/// 64-byte aligned storage. Eigen peels unaligned leading elements before its
/// packet loops, so the summation order of a reduction would otherwise depend
/// on where the heap placed a buffer, and runs would not be bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// True unless a StopGradient scope is active on this thread.
bool grad_enabled();

/// Scope marker for the stop-gradient (teacher) branch: ops evaluated inside
/// produce constants, so no parameter touched here can appear in a GradMap.
class StopGradient {
 public:
  StopGradient();
  ~StopGradient();
  StopGradient(const StopGradient&) = delete;
  StopGradient& operator=(const StopGradient&) = delete;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// In-place access for optimizers and initializers. Mutating a tensor that
  /// is part of a live graph invalidates that graph's saved activations.
  std::span<T> mutable_data() { return node_->value; }
  std::vector<T> to_vector() const { return {node_->value.begin(), node_->value.end()}; }

  T item() const;
  T operator[](std::size_t flat) const { return node_->value[flat]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on);
  const char* op_name() const { return node_->op; }

  /// Constant copy with no graph history.
  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return BasicTensor<U>(node_->shape, std::move(out));
  }

  /// Parameter identity used as a GradMap key.
  const void* id() const { return node_.get(); }

  const NodePtr& node() const { return node_; }
  static BasicTensor from_node(NodePtr n) {
    BasicTensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Gradients keyed by parameter identity. Holds exactly the leaves with
/// requires_grad that are reachable from the loss.
template <typename T>
class GradMap {
 public:
  bool contains(const BasicTensor<T>& param) const { return grads_.count(param.id()) != 0; }
  const BasicTensor<T>& at(const BasicTensor<T>& param) const;
  std::size_t size() const { return grads_.size(); }
  void insert(const void* key, BasicTensor<T> grad) { grads_[key] = std::move(grad); }

 private:
  std::unordered_map<const void*, BasicTensor<T>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Intermediate gradients are reset at
/// the start of every call, so calling twice on one graph re-derives identical
/// values instead of accumulating.
template <typename T>
GradMap<T> backward(const BasicTensor<T>& loss);

// ---- ops ------------------------------------------------------------------
//
// Broadcasting rule for add/sub/mul: the second operand's shape must equal the
// first's, or equal a trailing suffix of it (row-vector style broadcast).

template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// x[..., k] * w[k, n] (+ bias[n]); leading dims of x are flattened.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);
/// log(max(x, clamp_min)); the gradient is zero where the clamp is active.
template <typename T> BasicTensor<T> log(const BasicTensor<T>& x, T clamp_min = T(0));
/// softmax(x / temperature) along `axis`, max-shifted.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1, T temperature = T(1));
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps = T(1e-6));
/// x / max(||x||, eps) along the last axis.
template <typename T> BasicTensor<T> l2_normalize(const BasicTensor<T>& x, T eps = T(1e-12));
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
/// Row lookup: table[R, C] gathered at `rows` -> [rows.size(), C].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::size_t> rows);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
/// Stacks `count` copies of x along a new leading axis.
template <typename T> BasicTensor<T> tile(const BasicTensor<T>& x, std::size_t count);
/// Treats x as rows of width e.size(); row r becomes e where mask[r] is set.
template <typename T>
BasicTensor<T> mask_rows(const BasicTensor<T>& x, std::span<const std::uint8_t> mask,
                         const BasicTensor<T>& e);
/// Fused scaled-dot-product multi-head self attention over qkv[B, T, 3d].
/// Returns [B, T, d]; if `probs` is non-null it receives the attention
/// probabilities [B, heads, T, T] as a constant.
template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& qkv, std::size_t heads,
                                    BasicTensor<T>* probs = nullptr);

/// Maximum elementwise relative error between the analytic gradient of f at x
/// and central differences with step eps. Relative error per element is
/// |a - n| / max(|a|, |n|, floor).
template <typename T>
double finite_diff_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                         const BasicTensor<T>& x, double eps, double floor = 1e-4);

/// Same comparison, but the analytic gradient comes from the float path and
/// the central differences from an independent double-precision evaluation.
double finite_diff_check_mixed(const std::function<Tensor(const Tensor&)>& f32,
                               const std::function<Tensor64(const Tensor64&)>& f64,
                               const Tensor& x, double eps, double floor = 1e-4);

/// Throws NumericError if any entry is NaN or infinite.
template <typename T> void check_finite(const BasicTensor<T>& x, const std::string& where);

}  // namespace smkd
