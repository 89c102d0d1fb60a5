#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "smkd/random.hpp"

namespace smkd {

/// Boolean mask over the N-patch grid (1 = masked).
struct MaskSpec {
  std::vector<std::uint8_t> grid;
  double target_ratio = 0.0;

  std::size_t size() const { return grid.size(); }
  std::size_t popcount() const;
  double achieved_ratio() const { return grid.empty() ? 0.0 : double(popcount()) / double(grid.size()); }
  static MaskSpec none(std::size_t n) { return MaskSpec{std::vector<std::uint8_t>(n, 0), 0.0}; }
};

enum class MaskKind { block, random, none };

MaskKind parse_mask_kind(const std::string& name);
std::string to_string(MaskKind kind);

/// Mixture: 0 with probability `zero_prob`, otherwise U[low, high].
struct MaskRatioParams {
  double zero_prob = 0.5;
  double low = 0.1;
  double high = 0.5;
};

double sample_mask_ratio(Rng& rng, const MaskRatioParams& params = {});

struct BlockMaskParams {
  std::size_t min_block_area = 4;
  double min_aspect = 0.3;  // max aspect is 1 / min_aspect
};

/// Axis-aligned rectangle of grid cells.
struct GridRect {
  std::size_t top, left, height, width;
};

/// Blockwise mask: rectangles of log-uniform aspect are added until exactly
/// ceil(ratio * N) cells are masked. Blocks are clipped to the remaining
/// budget, so the result never overshoots the target by a cell.
MaskSpec sample_block_mask(std::size_t grid_h, std::size_t grid_w, double ratio, Rng& rng,
                           const BlockMaskParams& params = {}, std::vector<GridRect>* blocks = nullptr);

/// Exactly round(n * ratio) positions chosen uniformly without replacement.
MaskSpec sample_random_mask(std::size_t n, double ratio, Rng& rng);

/// Draws a ratio and a mask of the requested kind.
MaskSpec sample_mask(MaskKind kind, std::size_t grid_h, std::size_t grid_w, Rng& rng,
                     const MaskRatioParams& ratio_params = {}, const BlockMaskParams& block_params = {});

}  // namespace smkd
