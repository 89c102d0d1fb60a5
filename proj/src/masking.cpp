#include "smkd/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smkd/error.hpp"

namespace smkd {

std::size_t MaskSpec::popcount() const {
  return static_cast<std::size_t>(std::count_if(grid.begin(), grid.end(), [](std::uint8_t m) { return m != 0; }));
}

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "block") return MaskKind::block;
  if (name == "random") return MaskKind::random;
  if (name == "none") return MaskKind::none;
  throw ConfigError("unknown mask kind '" + name + "' (expected block, random or none)");
}

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::block: return "block";
    case MaskKind::random: return "random";
    case MaskKind::none: return "none";
  }
  return "none";
}

double sample_mask_ratio(Rng& rng, const MaskRatioParams& params) {
  if (uniform01(rng) < params.zero_prob) return 0.0;
  return std::uniform_real_distribution<double>(params.low, params.high)(rng);
}

namespace {

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ParameterError("mask ratio must lie in [0, 1]");
}

}  // namespace

MaskSpec sample_block_mask(std::size_t grid_h, std::size_t grid_w, double ratio, Rng& rng,
                           const BlockMaskParams& params, std::vector<GridRect>* blocks) {
  check_ratio(ratio);
  const std::size_t n = grid_h * grid_w;
  MaskSpec mask = MaskSpec::none(n);
  mask.target_ratio = ratio;
  const auto target = static_cast<std::size_t>(std::ceil(ratio * double(n) - 1e-9));
  const double log_lo = std::log(params.min_aspect), log_hi = std::log(1.0 / params.min_aspect);
  std::size_t count = 0;
  std::size_t stalls = 0;
  while (count < target) {
    const std::size_t remaining = target - count;
    const std::size_t lo_area = std::min(params.min_block_area, remaining);
    const double area = std::uniform_real_distribution<double>(double(lo_area), double(remaining) + 1e-9)(rng);
    const double aspect = std::exp(std::uniform_real_distribution<double>(log_lo, log_hi)(rng));
    auto h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    h = std::clamp<std::size_t>(h, 1, std::min(grid_h, remaining));
    w = std::clamp<std::size_t>(w, 1, std::min(grid_w, std::max<std::size_t>(1, remaining / h)));
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, grid_h - h)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, grid_w - w)(rng);
    std::size_t added = 0;
    for (std::size_t y = top; y < top + h; ++y)
      for (std::size_t x = left; x < left + w; ++x) added += mask.grid[y * grid_w + x] == 0;
    if (added == 0) {
      // Fully covered region; after repeated misses fall back to a single free cell.
      if (++stalls < 16) continue;
      std::vector<std::size_t> free_cells;
      for (std::size_t i = 0; i < n; ++i)
        if (!mask.grid[i]) free_cells.push_back(i);
      const std::size_t c = free_cells[std::uniform_int_distribution<std::size_t>(0, free_cells.size() - 1)(rng)];
      mask.grid[c] = 1;
      ++count;
      if (blocks) blocks->push_back({c / grid_w, c % grid_w, 1, 1});
      stalls = 0;
      continue;
    }
    stalls = 0;
    for (std::size_t y = top; y < top + h; ++y)
      for (std::size_t x = left; x < left + w; ++x) mask.grid[y * grid_w + x] = 1;
    count += added;
    if (blocks) blocks->push_back({top, left, h, w});
  }
  return mask;
}

MaskSpec sample_random_mask(std::size_t n, double ratio, Rng& rng) {
  check_ratio(ratio);
  MaskSpec mask = MaskSpec::none(n);
  mask.target_ratio = ratio;
  const auto k = static_cast<std::size_t>(std::lround(double(n) * ratio));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(idx[i], idx[j]);
    mask.grid[idx[i]] = 1;
  }
  return mask;
}

MaskSpec sample_mask(MaskKind kind, std::size_t grid_h, std::size_t grid_w, Rng& rng,
                     const MaskRatioParams& ratio_params, const BlockMaskParams& block_params) {
  if (kind == MaskKind::none) return MaskSpec::none(grid_h * grid_w);
  const double ratio = sample_mask_ratio(rng, ratio_params);
  if (kind == MaskKind::block) return sample_block_mask(grid_h, grid_w, ratio, rng, block_params);
  return sample_random_mask(grid_h * grid_w, ratio, rng);
}

}  // namespace smkd
