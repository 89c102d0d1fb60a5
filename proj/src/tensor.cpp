#include "smkd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace smkd {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local int stop_gradient_depth = 0;

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;
template <typename T>
using Buffer = detail::Buffer<T>;

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
BasicTensor<T> constant_tensor(Shape shape, Buffer<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return BasicTensor<T>::from_node(std::move(n));
}

template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> value, const char* op,
                           std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool record = grad_enabled() &&
                std::any_of(parents.begin(), parents.end(), [](const NodePtr<T>& p) { return p->requires_grad; });
  if (record) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return BasicTensor<T>::from_node(std::move(n));
}

template <typename T>
void require_defined(const BasicTensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename T>
void check_broadcast(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                         shape_string(a.shape()));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range");
  return static_cast<std::size_t>(axis);
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

bool grad_enabled() { return stop_gradient_depth == 0; }
StopGradient::StopGradient() { ++stop_gradient_depth; }
StopGradient::~StopGradient() { --stop_gradient_depth; }

// ---- BasicTensor ----------------------------------------------------------

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dims must be positive: " + shape_string(shape));
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value.assign(data.begin(), data.end());
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::size_t n = numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
T BasicTensor<T>::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return constant_tensor(node_->shape, Buffer<T>(node_->value));
}

template <typename T>
const BasicTensor<T>& GradMap<T>::at(const BasicTensor<T>& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) throw ContractError("parameter has no gradient entry");
  return it->second;
}

// ---- backward -------------------------------------------------------------

template <typename T>
GradMap<T> backward(const BasicTensor<T>& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) throw ContractError("backward requires a scalar loss, got " + shape_string(loss.shape()));
  GradMap<T> out;
  const auto& root = loss.node();
  if (!root->requires_grad) return out;

  // Iterative post-order DFS -> topological order (parents before children).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    auto& g = n->ensure_grad();
    std::fill(g.begin(), g.end(), T(0));
  }
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (n->is_leaf) out.insert(n, constant_tensor(n->shape, Buffer<T>(n->grad)));
  }
  return out;
}

// ---- ops ------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return make_result<T>({m, n}, std::move(out), "matmul", {an, bn}, [an, bn, m, k, n](Node<T>& self) {
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (an->requires_grad)
      MatMap<T>(an->ensure_grad().data(), m, k).noalias() += g * ConstMatMap<T>(bn->value.data(), k, n).transpose();
    if (bn->requires_grad)
      MatMap<T>(bn->ensure_grad().data(), k, n).noalias() += ConstMatMap<T>(an->value.data(), m, k).transpose() * g;
  });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.size() / k;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != n))
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs output width " + std::to_string(n));
  Buffer<T> out(m * n);
  MatMap<T> y(out.data(), m, n);
  y.noalias() = ConstMatMap<T>(x.data().data(), m, k) * ConstMatMap<T>(w.data().data(), k, n);
  if (has_bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data().data(), n);
    y.rowwise() += bv;
  }
  Shape shape = x.shape();
  shape.back() = n;
  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? bias.node() : nullptr;
  std::vector<NodePtr<T>> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return make_result<T>(std::move(shape), std::move(out), "linear", std::move(parents),
                        [xn, wn, bn, m, k, n](Node<T>& self) {
                          ConstMatMap<T> g(self.grad.data(), m, n);
                          if (xn->requires_grad)
                            MatMap<T>(xn->ensure_grad().data(), m, k).noalias() +=
                                g * ConstMatMap<T>(wn->value.data(), k, n).transpose();
                          if (wn->requires_grad)
                            MatMap<T>(wn->ensure_grad().data(), k, n).noalias() +=
                                ConstMatMap<T>(xn->value.data(), m, k).transpose() * g;
                          if (bn && bn->requires_grad) {
                            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(bn->ensure_grad().data(), n);
                            gb += g.colwise().sum();
                          }
                        });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Buffer<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto an = a.node();
  return make_result<T>({c, r}, std::move(out), "transpose", {an}, [an, r, c](Node<T>& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

namespace {

enum class Binary { add, sub, mul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, Binary kind, const char* name) {
  check_broadcast(a, b, name);
  const std::size_t na = a.size(), nb = b.size();
  Buffer<T> out(na);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < na; ++i) {
    T x = av[i], y = bv[i % nb];
    out[i] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
  }
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), name, {an, bn}, [an, bn, na, nb, kind](Node<T>& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      if (kind == Binary::mul)
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i] * bn->value[i % nb];
      else
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      if (kind == Binary::mul)
        for (std::size_t i = 0; i < na; ++i) gb[i % nb] += g[i] * an->value[i];
      else if (kind == Binary::sub)
        for (std::size_t i = 0; i < na; ++i) gb[i % nb] -= g[i];
      else
        for (std::size_t i = 0; i < na; ++i) gb[i % nb] += g[i];
    }
  });
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::add, "add");
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::sub, "sub");
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::mul, "mul");
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  require_defined(a, "scale");
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), "scale", {an}, [an, factor](Node<T>& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  require_defined(x, "gelu");
  const T inv_sqrt2 = T(0.70710678118654752440);
  Buffer<T> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), "gelu", {xn}, [xn, inv_sqrt2](Node<T>& self) {
    const T inv_sqrt_2pi = T(0.39894228040143267794);
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T v = xn->value[i];
      T d = T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += d * self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x, T clamp_min) {
  require_defined(x, "log");
  Buffer<T> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xv[i] < T(0)) throw ParameterError("log: negative input " + std::to_string(xv[i]));
    out[i] = std::log(std::max(xv[i], clamp_min));
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), "log", {xn}, [xn, clamp_min](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T v = xn->value[i];
      if (v > clamp_min) g[i] += self.grad[i] / v;
    }
  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis, T temperature) {
  require_defined(x, "softmax");
  if (!(temperature > T(0))) throw ParameterError("softmax: temperature must be positive");
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Buffer<T> out(x.size());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.len; ++j) {
        T e = std::exp((xv[base + j * s.inner] - mx) / temperature);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), "softmax", {xn}, [xn, s, temperature](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < s.len; ++j) {
          std::size_t k = base + j * s.inner;
          dot += self.grad[k] * self.value[k];
        }
        for (std::size_t j = 0; j < s.len; ++j) {
          std::size_t k = base + j * s.inner;
          g[k] += self.value[k] * (self.grad[k] - dot) / temperature;
        }
      }
  });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw DimensionError("layer_norm: gain/bias must match last dim " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  Buffer<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result<T>(x.shape(), std::move(out), "layer_norm", {xn, gn, bn},
                        [xn, gn, bn, xhat, inv_std, rows, d](Node<T>& self) {
                          const auto& g = self.grad;
                          if (gn->requires_grad) {
                            auto& gg = gn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                          }
                          if (bn->requires_grad) {
                            auto& gb = bn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                          }
                          if (xn->requires_grad) {
                            auto& gx = xn->ensure_grad();
                            std::vector<T> dh(d);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T m1 = 0, m2 = 0;
                              for (std::size_t j = 0; j < d; ++j) {
                                dh[j] = g[r * d + j] * gn->value[j];
                                m1 += dh[j];
                                m2 += dh[j] * (*xhat)[r * d + j];
                              }
                              m1 /= T(d);
                              m2 /= T(d);
                              for (std::size_t j = 0; j < d; ++j)
                                gx[r * d + j] += (*inv_std)[r] * (dh[j] - m1 - (*xhat)[r * d + j] * m2);
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, T eps) {
  require_defined(x, "l2_normalize");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Buffer<T> out(x.size());
  auto norms = std::make_shared<std::vector<T>>(rows);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    T nrm = std::sqrt(ss);
    (*norms)[r] = nrm;
    T denom = std::max(nrm, eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / denom;
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), "l2_normalize", {xn}, [xn, norms, rows, d, eps](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      T nrm = (*norms)[r];
      if (nrm > eps) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.value[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          g[r * d + j] += (self.grad[r * d + j] - self.value[r * d + j] * dot) / nrm;
      } else {
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r * d + j] / eps;
      }
    }
  });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i])
        throw DimensionError("concat: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(ref));
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit so = split_axis(out_shape, axis);
  Buffer<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.dim(axis) * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * so.len * so.inner + off * so.inner);
    off += p.dim(axis);
  }
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  auto ps = parents;
  return make_result<T>(std::move(out_shape), std::move(out), "concat", std::move(parents),
                        [ps, offsets, so, axis](Node<T>& self) {
                          for (std::size_t i = 0; i < ps.size(); ++i) {
                            if (!ps[i]->requires_grad) continue;
                            auto& g = ps[i]->ensure_grad();
                            const std::size_t chunk = ps[i]->shape[axis] * so.inner;
                            for (std::size_t o = 0; o < so.outer; ++o) {
                              const T* src = self.grad.data() + o * so.len * so.inner + offsets[i] * so.inner;
                              T* dst = g.data() + o * chunk;
                              for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  require_defined(x, "sum");
  T total = 0;
  for (T v : x.data()) total += v;
  auto xn = x.node();
  return make_result<T>(Shape{}, Buffer<T>{total}, "sum", {xn}, [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::size_t> rows) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  if (rows.empty()) throw DimensionError("embedding: empty index list");
  const std::size_t r = table.dim(0), c = table.dim(1);
  Buffer<T> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) throw DimensionError("embedding: row index " + std::to_string(rows[i]) + " out of range");
    std::copy_n(table.data().data() + rows[i] * c, c, out.data() + i * c);
  }
  auto tn = table.node();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>({rows.size(), c}, std::move(out), "embedding", {tn}, [tn, idx, c](Node<T>& self) {
    auto& g = tn->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  auto xn = x.node();
  return make_result<T>(std::move(shape), Buffer<T>(xn->value), "reshape", {xn}, [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for " + shape_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  Buffer<T> out(numel(shape));
  const std::size_t chunk = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data().data() + o * s.len * s.inner + start * s.inner, chunk, out.data() + o * chunk);
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), "slice", {xn}, [xn, s, start, chunk](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = g.data() + o * s.len * s.inner + start * s.inner;
      const T* src = self.grad.data() + o * chunk;
      for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
    }
  });
}

template <typename T>
BasicTensor<T> tile(const BasicTensor<T>& x, std::size_t count) {
  require_defined(x, "tile");
  if (count == 0) throw DimensionError("tile: count must be positive");
  Shape shape{count};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t n = x.size();
  Buffer<T> out(n * count);
  for (std::size_t c = 0; c < count; ++c) std::copy_n(x.data().data(), n, out.data() + c * n);
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), "tile", {xn}, [xn, n, count](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
  });
}

template <typename T>
BasicTensor<T> mask_rows(const BasicTensor<T>& x, std::span<const std::uint8_t> mask, const BasicTensor<T>& e) {
  require_defined(x, "mask_rows");
  require_defined(e, "mask_rows");
  const std::size_t d = e.size();
  if (e.rank() != 1 || x.shape().back() != d)
    throw DimensionError("mask_rows: embedding " + shape_string(e.shape()) + " vs rows of " + shape_string(x.shape()));
  const std::size_t rows = x.size() / d;
  if (mask.size() != rows)
    throw DimensionError("mask_rows: mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  Buffer<T> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r)
    if (mask[r]) std::copy_n(e.data().data(), d, out.data() + r * d);
  auto xn = x.node(), en = e.node();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_result<T>(x.shape(), std::move(out), "mask_rows", {xn, en}, [xn, en, m, d](Node<T>& self) {
    for (std::size_t r = 0; r < m.size(); ++r) {
      const T* src = self.grad.data() + r * d;
      if (m[r]) {
        if (en->requires_grad) {
          auto& g = en->ensure_grad();
          for (std::size_t j = 0; j < d; ++j) g[j] += src[j];
        }
      } else if (xn->requires_grad) {
        auto& g = xn->ensure_grad();
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += src[j];
      }
    }
  });
}

template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& qkv, std::size_t heads, BasicTensor<T>* probs) {
  require_defined(qkv, "multi_head_attention");
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0 || heads == 0 || (qkv.dim(2) / 3) % heads != 0)
    throw DimensionError("multi_head_attention: bad qkv shape " + shape_string(qkv.shape()) + " for " +
                         std::to_string(heads) + " heads");
  const std::size_t B = qkv.dim(0), S = qkv.dim(1), D = qkv.dim(2) / 3, dh = D / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto p = std::make_shared<std::vector<T>>(B * heads * S * S);
  Buffer<T> out(B * S * D);
  const T* q = qkv.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = p->data() + (b * heads + h) * S * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T* qi = q + (b * S + i) * 3 * D + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          const T* kj = q + (b * S + j) * 3 * D + D + h * dh;
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          P[i * S + j] = dot * sc;
          mx = std::max(mx, P[i * S + j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < S; ++j) {
          P[i * S + j] = std::exp(P[i * S + j] - mx);
          total += P[i * S + j];
        }
        for (std::size_t j = 0; j < S; ++j) P[i * S + j] /= total;
        T* oi = out.data() + (b * S + i) * D + h * dh;
        for (std::size_t j = 0; j < S; ++j) {
          const T* vj = q + (b * S + j) * 3 * D + 2 * D + h * dh;
          const T w = P[i * S + j];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  if (probs) *probs = BasicTensor<T>({B, heads, S, S}, *p);
  auto qn = qkv.node();
  return make_result<T>({B, S, D}, std::move(out), "multi_head_attention", {qn},
                        [qn, p, B, S, D, dh, heads, sc](Node<T>& self) {
                          auto& g = qn->ensure_grad();
                          const T* q = qn->value.data();
                          std::vector<T> dP(S * S);
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t h = 0; h < heads; ++h) {
                              const T* P = p->data() + (b * heads + h) * S * S;
                              // dP = dO V^T ; dV = P^T dO
                              for (std::size_t i = 0; i < S; ++i) {
                                const T* doi = self.grad.data() + (b * S + i) * D + h * dh;
                                for (std::size_t j = 0; j < S; ++j) {
                                  const T* vj = q + (b * S + j) * 3 * D + 2 * D + h * dh;
                                  T* gvj = g.data() + (b * S + j) * 3 * D + 2 * D + h * dh;
                                  T dot = 0;
                                  const T w = P[i * S + j];
                                  for (std::size_t c = 0; c < dh; ++c) {
                                    dot += doi[c] * vj[c];
                                    gvj[c] += w * doi[c];
                                  }
                                  dP[i * S + j] = dot;
                                }
                              }
                              // dS = P * (dP - rowsum(dP * P)) * scale
                              for (std::size_t i = 0; i < S; ++i) {
                                T rs = 0;
                                for (std::size_t j = 0; j < S; ++j) rs += dP[i * S + j] * P[i * S + j];
                                for (std::size_t j = 0; j < S; ++j) dP[i * S + j] = P[i * S + j] * (dP[i * S + j] - rs) * sc;
                              }
                              for (std::size_t i = 0; i < S; ++i) {
                                const T* qi = q + (b * S + i) * 3 * D + h * dh;
                                T* gqi = g.data() + (b * S + i) * 3 * D + h * dh;
                                for (std::size_t j = 0; j < S; ++j) {
                                  const T ds = dP[i * S + j];
                                  const T* kj = q + (b * S + j) * 3 * D + D + h * dh;
                                  T* gkj = g.data() + (b * S + j) * 3 * D + D + h * dh;
                                  for (std::size_t c = 0; c < dh; ++c) {
                                    gqi[c] += ds * kj[c];
                                    gkj[c] += ds * qi[c];
                                  }
                                }
                              }
                            }
                        });
}

template <typename T>
void check_finite(const BasicTensor<T>& x, const std::string& where) {
  for (T v : x.data())
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + where);
}

// ---- finite differences ---------------------------------------------------

namespace {

double rel_err(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace

template <typename T>
double finite_diff_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
                         double eps, double floor) {
  BasicTensor<T> param(x.shape(), x.to_vector(), true);
  auto grads = backward(f(param));
  std::vector<T> analytic = grads.contains(param) ? grads.at(param).to_vector() : std::vector<T>(x.size(), T(0));
  double worst = 0;
  StopGradient sg;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<T> v = x.to_vector();
    const T orig = v[i];
    v[i] = orig + T(eps);
    const double fp = f(BasicTensor<T>(x.shape(), v)).item();
    v[i] = orig - T(eps);
    const double fm = f(BasicTensor<T>(x.shape(), v)).item();
    worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2 * eps), floor));
  }
  return worst;
}

double finite_diff_check_mixed(const std::function<Tensor(const Tensor&)>& f32,
                               const std::function<Tensor64(const Tensor64&)>& f64, const Tensor& x, double eps,
                               double floor) {
  Tensor param(x.shape(), x.to_vector(), true);
  auto grads = backward(f32(param));
  std::vector<float> analytic = grads.contains(param) ? grads.at(param).to_vector() : std::vector<float>(x.size(), 0.f);
  const std::vector<double> base(x.data().begin(), x.data().end());
  double worst = 0;
  StopGradient sg;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> v = base;
    v[i] = base[i] + eps;
    const double fp = f64(Tensor64(x.shape(), v)).item();
    v[i] = base[i] - eps;
    const double fm = f64(Tensor64(x.shape(), v)).item();
    worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2 * eps), floor));
  }
  return worst;
}

// ---- instantiations -------------------------------------------------------

#define SMKD_INSTANTIATE(T)                                                                                  \
  template class BasicTensor<T>;                                                                             \
  template class GradMap<T>;                                                                                 \
  template GradMap<T> backward(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                   \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> log(const BasicTensor<T>&, T);                                                     \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int, T);                                            \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T); \
  template BasicTensor<T> l2_normalize(const BasicTensor<T>&, T);                                            \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                           \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const std::size_t>);                    \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                             \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);               \
  template BasicTensor<T> tile(const BasicTensor<T>&, std::size_t);                                          \
  template BasicTensor<T> mask_rows(const BasicTensor<T>&, std::span<const std::uint8_t>,                    \
                                    const BasicTensor<T>&);                                                  \
  template BasicTensor<T> multi_head_attention(const BasicTensor<T>&, std::size_t, BasicTensor<T>*);         \
  template void check_finite(const BasicTensor<T>&, const std::string&);                                     \
  template double finite_diff_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>&,             \
                                    const BasicTensor<T>&, double, double);

SMKD_INSTANTIATE(float)
SMKD_INSTANTIATE(double)

#undef SMKD_INSTANTIATE

}  // namespace smkd
