#include "smkd/vit.hpp"

#include <algorithm>
#include <cmath>

#include "smkd/error.hpp"

namespace smkd {

void VitConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("image_size must be a positive multiple of patch_size");
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
    throw ConfigError("embed_dim must be a positive multiple of num_heads");
  if (depth == 0) throw ConfigError("depth must be positive");
  if (mlp_hidden() == 0) throw ConfigError("mlp_ratio too small");
}

template <typename T>
void VitParams<T>::visit(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  fn("patch_w", patch_w);
  fn("patch_b", patch_b);
  fn("cls_token", cls_token);
  fn("mask_token", mask_token);
  fn("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    fn(p + "norm1_g", b.norm1_g);
    fn(p + "norm1_b", b.norm1_b);
    fn(p + "qkv_w", b.qkv_w);
    fn(p + "qkv_b", b.qkv_b);
    fn(p + "proj_w", b.proj_w);
    fn(p + "proj_b", b.proj_b);
    fn(p + "norm2_g", b.norm2_g);
    fn(p + "norm2_b", b.norm2_b);
    fn(p + "fc1_w", b.fc1_w);
    fn(p + "fc1_b", b.fc1_b);
    fn(p + "fc2_w", b.fc2_w);
    fn(p + "fc2_b", b.fc2_b);
  }
  fn("norm_g", norm_g);
  fn("norm_b", norm_b);
}

namespace {

template <typename T>
BasicTensor<T> trunc_normal(Shape shape, Rng& rng, bool rg) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(truncated_normal(rng, 0.02));
  return BasicTensor<T>(std::move(shape), std::move(v), rg);
}

}  // namespace

template <typename T>
VitParams<T> init_vit(const VitConfig& cfg, Rng& rng, bool rg) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, h = cfg.mlp_hidden();
  VitParams<T> p;
  p.patch_w = trunc_normal<T>({cfg.patch_dim(), d}, rng, rg);
  p.patch_b = BasicTensor<T>::zeros({d}, rg);
  p.cls_token = trunc_normal<T>({d}, rng, rg);
  p.mask_token = BasicTensor<T>::zeros({d}, rg);
  p.pos_embed = trunc_normal<T>({cfg.num_patches() + 1, d}, rng, rg);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockParams<T> b;
    b.norm1_g = BasicTensor<T>::full({d}, T(1), rg);
    b.norm1_b = BasicTensor<T>::zeros({d}, rg);
    b.qkv_w = trunc_normal<T>({d, 3 * d}, rng, rg);
    b.qkv_b = BasicTensor<T>::zeros({3 * d}, rg);
    b.proj_w = trunc_normal<T>({d, d}, rng, rg);
    b.proj_b = BasicTensor<T>::zeros({d}, rg);
    b.norm2_g = BasicTensor<T>::full({d}, T(1), rg);
    b.norm2_b = BasicTensor<T>::zeros({d}, rg);
    b.fc1_w = trunc_normal<T>({d, h}, rng, rg);
    b.fc1_b = BasicTensor<T>::zeros({h}, rg);
    b.fc2_w = trunc_normal<T>({h, d}, rng, rg);
    b.fc2_b = BasicTensor<T>::zeros({d}, rg);
    p.blocks.push_back(std::move(b));
  }
  p.norm_g = BasicTensor<T>::full({d}, T(1), rg);
  p.norm_b = BasicTensor<T>::zeros({d}, rg);
  return p;
}

template <typename T>
TokenSet<T> BatchTokens<T>::item(std::size_t b) const {
  TokenSet<T> ts;
  const std::size_t d = cls.dim(1);
  ts.cls = reshape(slice(cls, 0, b, 1), {d});
  ts.patches = reshape(slice(patches, 0, b, 1), {patches.dim(1), d});
  if (attn.defined()) {
    Shape s(attn.shape().begin() + 1, attn.shape().end());
    ts.attn = reshape(slice(attn, 0, b, 1), s);
  }
  return ts;
}

template <typename T>
BasicTensor<T> extract_patches(const BasicTensor<T>& images, std::size_t p) {
  const bool batched = images.rank() == 4;
  if (!(images.rank() == 3 || batched)) throw DimensionError("extract_patches: expected [C,H,W] or [B,C,H,W]");
  const std::size_t B = batched ? images.dim(0) : 1;
  const std::size_t C = images.dim(batched ? 1 : 0), H = images.dim(batched ? 2 : 1), W = images.dim(batched ? 3 : 2);
  if (H % p != 0 || W % p != 0)
    throw DimensionError("extract_patches: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by patch size " + std::to_string(p));
  const std::size_t gh = H / p, gw = W / p, n = gh * gw, pd = C * p * p;
  std::vector<T> out(B * n * pd);
  auto src = images.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        T* dst = out.data() + (b * n + gy * gw + gx) * pd;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              *dst++ = src[((b * C + c) * H + gy * p + y) * W + gx * p + x];
      }
  if (batched) return BasicTensor<T>({B, n, pd}, std::move(out));
  return BasicTensor<T>({n, pd}, std::move(out));
}

template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& images, const VitConfig& cfg, const VitParams<T>& params) {
  const std::size_t rank = images.rank();
  if (rank != 3 && rank != 4) throw DimensionError("patchify: expected [3,H,W] or [B,3,H,W]");
  const std::size_t c = images.dim(rank - 3), h = images.dim(rank - 2), w = images.dim(rank - 1);
  if (c != cfg.in_chans || h != w || h > cfg.image_size || h % cfg.patch_size != 0)
    throw DimensionError("patchify: image " + shape_string(images.shape()) + " incompatible with image_size " +
                         std::to_string(cfg.image_size) + " / patch " + std::to_string(cfg.patch_size));
  return linear(extract_patches(images, cfg.patch_size), params.patch_w, params.patch_b);
}

template <typename T>
BasicTensor<T> apply_mask_tokens(const BasicTensor<T>& patch_embeds, std::span<const std::uint8_t> mask,
                                 const BasicTensor<T>& e_mask) {
  return mask_rows(patch_embeds, mask, e_mask);
}

template <typename T>
BasicTensor<T> apply_mask_tokens(const BasicTensor<T>& patch_embeds, const MaskSpec& mask,
                                 const BasicTensor<T>& e_mask) {
  return mask_rows(patch_embeds, std::span<const std::uint8_t>(mask.grid), e_mask);
}

std::vector<double> bilinear_resample_matrix(std::size_t from, std::size_t to) {
  std::vector<double> one(to * from, 0.0);
  for (std::size_t i = 0; i < to; ++i) {
    double src = (double(i) + 0.5) * double(from) / double(to) - 0.5;
    src = std::clamp(src, 0.0, double(from - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, from - 1);
    const double frac = src - double(i0);
    one[i * from + i0] += 1.0 - frac;
    one[i * from + i1] += frac;
  }
  std::vector<double> m(to * to * from * from, 0.0);
  for (std::size_t oy = 0; oy < to; ++oy)
    for (std::size_t ox = 0; ox < to; ++ox)
      for (std::size_t sy = 0; sy < from; ++sy)
        for (std::size_t sx = 0; sx < from; ++sx)
          m[(oy * to + ox) * from * from + sy * from + sx] = one[oy * from + sy] * one[ox * from + sx];
  return m;
}

template <typename T>
BatchTokens<T> forward(const BasicTensor<T>& tokens, const VitConfig& cfg, const VitParams<T>& params,
                       bool keep_attention) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.embed_dim)
    throw DimensionError("vit forward: expected tokens [B, n, " + std::to_string(cfg.embed_dim) + "], got " +
                         shape_string(tokens.shape()));
  const std::size_t B = tokens.dim(0), n = tokens.dim(1), d = cfg.embed_dim, N = cfg.num_patches();
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(double(n))));
  if (g * g != n || n > N) throw DimensionError("vit forward: token count must be a square grid no larger than N");

  auto cls = reshape(tile(params.cls_token, B), {B, 1, d});
  auto x = concat<T>({cls, tokens}, 1);
  BasicTensor<T> pos = params.pos_embed;
  if (n != N) {
    const auto m = bilinear_resample_matrix(cfg.grid(), g);
    BasicTensor<T> interp({n, N}, std::vector<T>(m.begin(), m.end()));
    pos = concat<T>({slice(params.pos_embed, 0, 0, 1), matmul(interp, slice(params.pos_embed, 0, 1, N))}, 0);
  }
  x = add(x, pos);

  const std::size_t S = n + 1, H = cfg.num_heads;
  std::vector<T> attn;
  if (keep_attention) attn.resize(B * cfg.depth * H * S * S);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& blk = params.blocks[l];
    auto h = layer_norm(x, blk.norm1_g, blk.norm1_b);
    BasicTensor<T> probs;
    auto a = multi_head_attention(linear(h, blk.qkv_w, blk.qkv_b), H, keep_attention ? &probs : nullptr);
    x = add(x, linear(a, blk.proj_w, blk.proj_b));
    h = layer_norm(x, blk.norm2_g, blk.norm2_b);
    x = add(x, linear(gelu(linear(h, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b));
    check_finite(x, "vit block " + std::to_string(l));
    if (keep_attention) {
      const std::size_t chunk = H * S * S;
      for (std::size_t b = 0; b < B; ++b)
        std::copy_n(probs.data().data() + b * chunk, chunk, attn.data() + (b * cfg.depth + l) * chunk);
    }
  }
  x = layer_norm(x, params.norm_g, params.norm_b);

  BatchTokens<T> out;
  out.cls = reshape(slice(x, 1, 0, 1), {B, d});
  out.patches = slice(x, 1, 1, n);
  if (keep_attention) out.attn = BasicTensor<T>({B, cfg.depth, H, S, S}, std::move(attn));
  return out;
}

template <typename T>
TokenSet<T> forward_one(const BasicTensor<T>& tokens, const VitConfig& cfg, const VitParams<T>& params) {
  if (tokens.rank() != 2) throw DimensionError("forward_one: expected [N, d]");
  auto batch = forward(reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}), cfg, params, true);
  return batch.item(0);
}

template <typename T>
BasicTensor<T> cls_attention_weights(const TokenSet<T>& ts) {
  const auto& a = ts.attn;
  if (!a.defined() || a.rank() != 4) throw DimensionError("cls_attention_weights: attention maps missing");
  const std::size_t depth = a.dim(0), heads = a.dim(1), S = a.dim(2), n = S - 1;
  std::vector<T> w(n, T(0));
  const T* last = a.data().data() + (depth - 1) * heads * S * S;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < n; ++j) w[j] += last[h * S * S + 1 + j] / T(heads);
  T total = 0;
  for (T v : w) total += v;
  for (T& v : w) v /= total;
  return BasicTensor<T>({n}, std::move(w));
}

#define SMKD_INSTANTIATE(T)                                                                                \
  template struct VitParams<T>;                                                                            \
  template struct BatchTokens<T>;                                                                          \
  template VitParams<T> init_vit<T>(const VitConfig&, Rng&, bool);                                         \
  template BasicTensor<T> extract_patches(const BasicTensor<T>&, std::size_t);                             \
  template BasicTensor<T> patchify(const BasicTensor<T>&, const VitConfig&, const VitParams<T>&);          \
  template BasicTensor<T> apply_mask_tokens(const BasicTensor<T>&, std::span<const std::uint8_t>,          \
                                            const BasicTensor<T>&);                                        \
  template BasicTensor<T> apply_mask_tokens(const BasicTensor<T>&, const MaskSpec&, const BasicTensor<T>&); \
  template BatchTokens<T> forward(const BasicTensor<T>&, const VitConfig&, const VitParams<T>&, bool);     \
  template TokenSet<T> forward_one(const BasicTensor<T>&, const VitConfig&, const VitParams<T>&);          \
  template BasicTensor<T> cls_attention_weights(const TokenSet<T>&);

SMKD_INSTANTIATE(float)
SMKD_INSTANTIATE(double)

#undef SMKD_INSTANTIATE

}  // namespace smkd
