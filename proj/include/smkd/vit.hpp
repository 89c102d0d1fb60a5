#pragma once

// Small Vision Transformer backbone: patch embedding, learnable [MASK]
// substitution, pre-norm attention/MLP blocks, and exposed attention maps.

#include <functional>
#include <string>
#include <vector>

#include "smkd/masking.hpp"
#include "smkd/random.hpp"
#include "smkd/tensor.hpp"

namespace smkd {

struct VitConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  std::size_t in_chans = 3;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(double(embed_dim) * mlp_ratio); }
  std::size_t patch_dim() const { return in_chans * patch_size * patch_size; }

  /// Throws ConfigError when the geometry is inconsistent.
  void validate() const;
};

template <typename T>
struct BlockParams {
  BasicTensor<T> norm1_g, norm1_b;
  BasicTensor<T> qkv_w, qkv_b;
  BasicTensor<T> proj_w, proj_b;
  BasicTensor<T> norm2_g, norm2_b;
  BasicTensor<T> fc1_w, fc1_b;
  BasicTensor<T> fc2_w, fc2_b;
};

template <typename T>
struct VitParams {
  BasicTensor<T> patch_w, patch_b;  // [patch_dim, d], [d]
  BasicTensor<T> cls_token;         // [d]
  BasicTensor<T> mask_token;        // [d], the learnable [MASK] embedding
  BasicTensor<T> pos_embed;         // [N + 1, d]
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> norm_g, norm_b;

  /// Visits every parameter with a stable dotted name, in a fixed order.
  void visit(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
};

/// Truncated-normal (std 0.02) weights, zero biases, unit norm gains,
/// zero [MASK] embedding.
template <typename T>
VitParams<T> init_vit(const VitConfig& cfg, Rng& rng, bool requires_grad = true);

/// Forward output for one image.
template <typename T>
struct TokenSet {
  BasicTensor<T> cls;      // [d]
  BasicTensor<T> patches;  // [N, d]
  BasicTensor<T> attn;     // [depth, heads, N + 1, N + 1], constant
};

/// Forward output for a batch of B images.
template <typename T>
struct BatchTokens {
  BasicTensor<T> cls;      // [B, d]
  BasicTensor<T> patches;  // [B, N, d]
  BasicTensor<T> attn;     // [B, depth, heads, N + 1, N + 1], constant; undefined unless requested

  TokenSet<T> item(std::size_t b) const;
};

/// Converts a normalized image [3, S, S] (or a batch [B, 3, S, S]) into
/// non-overlapping flattened patches [N, patch_dim] (resp. [B, N, patch_dim]).
/// Patches are ordered row-major over the grid; each patch is flattened as
/// (channel, row, column). Constant: images never carry gradients.
template <typename T>
BasicTensor<T> extract_patches(const BasicTensor<T>& images, std::size_t patch_size);

/// Linear patch embedding. Accepts [3, H, W] -> [N, d] or [B, 3, H, W] -> [B, N, d].
/// H and W may be smaller than cfg.image_size (local crops) but must be
/// multiples of the patch size.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& images, const VitConfig& cfg, const VitParams<T>& params);

/// x_hat_i = (1 - m_i) x_i + m_i e_mask. `mask` holds one flag per token row
/// (N for [N, d] input, B*N for [B, N, d]).
template <typename T>
BasicTensor<T> apply_mask_tokens(const BasicTensor<T>& patch_embeds, std::span<const std::uint8_t> mask,
                                 const BasicTensor<T>& e_mask);
template <typename T>
BasicTensor<T> apply_mask_tokens(const BasicTensor<T>& patch_embeds, const MaskSpec& mask,
                                 const BasicTensor<T>& e_mask);

/// Prepends [cls], adds positional embeddings, runs the blocks and the final
/// norm. tokens: [B, n, d] with n a square number <= N; a smaller grid uses
/// bilinearly resampled positional embeddings. Throws NumericError naming the
/// block index if a non-finite activation appears.
template <typename T>
BatchTokens<T> forward(const BasicTensor<T>& tokens, const VitConfig& cfg, const VitParams<T>& params,
                       bool keep_attention = true);

/// Single-image convenience: tokens [N, d].
template <typename T>
TokenSet<T> forward_one(const BasicTensor<T>& tokens, const VitConfig& cfg, const VitParams<T>& params);

/// Head-averaged attention of [cls] to each patch in the last layer,
/// renormalized to sum to one. Returns [N].
template <typename T>
BasicTensor<T> cls_attention_weights(const TokenSet<T>& ts);

/// Row-stochastic bilinear resampling matrix [to*to, from*from] between square
/// grids (align-corners=false convention).
std::vector<double> bilinear_resample_matrix(std::size_t from, std::size_t to);

}  // namespace smkd
