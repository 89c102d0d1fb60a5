#include "smkd/head.hpp"

#include "smkd/error.hpp"

namespace smkd {

void HeadConfig::validate() const {
  if (in_dim == 0 || hidden_dim == 0 || bottleneck_dim == 0 || out_dim == 0)
    throw ConfigError("head dimensions must be positive");
  if (!(student_temp > 0) || !(teacher_temp > 0) || !(warmup_teacher_temp > 0))
    throw ConfigError("head temperatures must be positive");
  if (!(center_momentum >= 0 && center_momentum < 1)) throw ConfigError("center_momentum must lie in [0, 1)");
}

template <typename T>
void HeadParams<T>::visit(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  fn("fc1_w", fc1_w);
  fn("fc1_b", fc1_b);
  fn("fc2_w", fc2_w);
  fn("fc2_b", fc2_b);
  fn("fc3_w", fc3_w);
  fn("fc3_b", fc3_b);
  fn("last_v", last_v);
}

template <typename T>
HeadParams<T> init_head(const HeadConfig& cfg, Rng& rng, bool rg) {
  cfg.validate();
  // Fan-in scaling keeps the bottleneck input away from zero in narrow heads,
  // where a fixed small std would let bias updates dominate its direction.
  auto tn = [&](Shape s) {
    const double std = 1.0 / std::sqrt(double(s[0]));
    std::vector<T> v(numel(s));
    for (auto& x : v) x = static_cast<T>(truncated_normal(rng, std));
    return BasicTensor<T>(std::move(s), std::move(v), rg);
  };
  HeadParams<T> p;
  p.fc1_w = tn({cfg.in_dim, cfg.hidden_dim});
  p.fc1_b = BasicTensor<T>::zeros({cfg.hidden_dim}, rg);
  p.fc2_w = tn({cfg.hidden_dim, cfg.hidden_dim});
  p.fc2_b = BasicTensor<T>::zeros({cfg.hidden_dim}, rg);
  p.fc3_w = tn({cfg.hidden_dim, cfg.bottleneck_dim});
  p.fc3_b = BasicTensor<T>::zeros({cfg.bottleneck_dim}, rg);
  p.last_v = tn({cfg.out_dim, cfg.bottleneck_dim});
  return p;
}

template <typename T>
Projection<T> project_full(const BasicTensor<T>& tokens, const HeadParams<T>& p) {
  auto h = gelu(linear(tokens, p.fc1_w, p.fc1_b));
  h = gelu(linear(h, p.fc2_w, p.fc2_b));
  auto z = l2_normalize(linear(h, p.fc3_w, p.fc3_b));
  auto directions = l2_normalize(p.last_v);
  Projection<T> out;
  out.bottleneck = z;
  out.logits = linear(z, transpose(directions), BasicTensor<T>());
  return out;
}

template <typename T>
BasicTensor<T> teacher_distribution(const BasicTensor<T>& logits, const CenterState<T>& cs, double teacher_temp) {
  if (!(teacher_temp > 0)) throw ParameterError("teacher temperature must be positive");
  StopGradient sg;
  return softmax(sub(logits.detach(), cs.center), -1, static_cast<T>(teacher_temp));
}

template <typename T>
BasicTensor<T> student_distribution(const BasicTensor<T>& logits, double student_temp) {
  if (!(student_temp > 0)) throw ParameterError("student temperature must be positive");
  return softmax(logits, -1, static_cast<T>(student_temp));
}

template <typename T>
CenterState<T> update_center(const CenterState<T>& cs, const BasicTensor<T>& batch, double momentum) {
  const std::size_t k = cs.center.size();
  if (batch.rank() != 2 || batch.dim(1) != k)
    throw DimensionError("update_center: expected [B, " + std::to_string(k) + "] logits, got " +
                         shape_string(batch.shape()));
  const std::size_t rows = batch.dim(0);
  std::vector<double> m(k, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) m[j] += batch[r * k + j];
  std::vector<T> c(k);
  for (std::size_t j = 0; j < k; ++j)
    c[j] = static_cast<T>(momentum * double(cs.center[j]) + (1.0 - momentum) * (m[j] / double(rows)));
  return {BasicTensor<T>({k}, std::move(c))};
}

#define SMKD_INSTANTIATE(T)                                                                             \
  template struct HeadParams<T>;                                                                        \
  template HeadParams<T> init_head<T>(const HeadConfig&, Rng&, bool);                                   \
  template Projection<T> project_full(const BasicTensor<T>&, const HeadParams<T>&);                     \
  template BasicTensor<T> teacher_distribution(const BasicTensor<T>&, const CenterState<T>&, double);   \
  template BasicTensor<T> student_distribution(const BasicTensor<T>&, double);                          \
  template CenterState<T> update_center(const CenterState<T>&, const BasicTensor<T>&, double);

SMKD_INSTANTIATE(float)
SMKD_INSTANTIATE(double)

#undef SMKD_INSTANTIATE

}  // namespace smkd
