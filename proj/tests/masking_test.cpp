#include "smkd/masking.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "smkd/error.hpp"

using namespace smkd;

TEST(MaskRatio, ZeroProbabilityAndConditionalMean) {
  Rng rng(2024);
  const int draws = 10000;
  int zeros = 0;
  double nonzero_sum = 0;
  for (int i = 0; i < draws; ++i) {
    const double r = sample_mask_ratio(rng);
    if (r == 0.0) {
      ++zeros;
    } else {
      EXPECT_GE(r, 0.1);
      EXPECT_LE(r, 0.5);
      nonzero_sum += r;
    }
  }
  EXPECT_NEAR(double(zeros) / draws, 0.5, 0.02);
  EXPECT_NEAR(nonzero_sum / double(draws - zeros), 0.30, 0.01);
}

TEST(MaskRatio, ConfigurableRange) {
  Rng rng(1);
  MaskRatioParams p{0.0, 0.2, 0.25};
  for (int i = 0; i < 1000; ++i) {
    const double r = sample_mask_ratio(rng, p);
    EXPECT_GE(r, 0.2);
    EXPECT_LE(r, 0.25);
  }
}

TEST(BlockMask, RatioZeroIsEmpty) {
  Rng rng(3);
  auto m = sample_block_mask(4, 4, 0.0, rng);
  EXPECT_EQ(m.popcount(), 0u);
  EXPECT_EQ(m.size(), 16u);
}

TEST(BlockMask, RatioOneIsFull) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    EXPECT_EQ(sample_block_mask(4, 4, 1.0, rng).popcount(), 16u);
  }
}

TEST(BlockMask, InvalidRatioRejected) {
  Rng rng(0);
  EXPECT_THROW(sample_block_mask(4, 4, 1.5, rng), ParameterError);
  EXPECT_THROW(sample_random_mask(16, -0.1, rng), ParameterError);
}

// Union of the recorded rectangles must reproduce the mask exactly, and the
// count must reach the target without passing it.
TEST(BlockMask, DecomposesIntoRectanglesOver100Seeds) {
  for (std::size_t seed = 0; seed < 100; ++seed) {
    for (double ratio : {0.1, 0.25, 0.3, 0.5, 0.75}) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(ratio * 100), 0));
      std::vector<GridRect> rects;
      auto m = sample_block_mask(4, 4, ratio, rng, {}, &rects);
      std::vector<std::uint8_t> cover(16, 0);
      for (const auto& r : rects) {
        ASSERT_GE(r.height, 1u);
        ASSERT_GE(r.width, 1u);
        ASSERT_LE(r.top + r.height, 4u);
        ASSERT_LE(r.left + r.width, 4u);
        for (std::size_t y = r.top; y < r.top + r.height; ++y)
          for (std::size_t x = r.left; x < r.left + r.width; ++x) cover[y * 4 + x] = 1;
      }
      EXPECT_EQ(cover, m.grid) << "seed " << seed << " ratio " << ratio;
      EXPECT_EQ(m.popcount(), static_cast<std::size_t>(std::ceil(ratio * 16 - 1e-9)));
    }
  }
}

namespace {

// Sizes of 4-connected components of the masked cells.
std::vector<std::size_t> components(const MaskSpec& m, std::size_t h, std::size_t w) {
  std::vector<int> seen(h * w, 0);
  std::vector<std::size_t> sizes;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!m.grid[start] || seen[start]) continue;
    std::vector<std::size_t> stack{start};
    seen[start] = 1;
    std::size_t size = 0;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t y = c / w, x = c % w;
      auto visit = [&](std::size_t ny, std::size_t nx) {
        const std::size_t i = ny * w + nx;
        if (m.grid[i] && !seen[i]) seen[i] = 1, stack.push_back(i);
      };
      if (y > 0) visit(y - 1, x);
      if (y + 1 < h) visit(y + 1, x);
      if (x > 0) visit(y, x - 1);
      if (x + 1 < w) visit(y, x + 1);
    }
    sizes.push_back(size);
  }
  return sizes;
}

}  // namespace

TEST(BlockMask, MultiCellTargetsAreNeverScatteredSingletons) {
  for (std::size_t seed = 0; seed < 100; ++seed) {
    for (double ratio : {0.25, 0.4, 0.5}) {
      Rng rng(derive_seed(seed, 7, static_cast<std::uint64_t>(ratio * 100)));
      auto m = sample_block_mask(4, 4, ratio, rng);
      const auto sizes = components(m, 4, 4);
      const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
      EXPECT_GE(largest, 2u) << "seed " << seed << " ratio " << ratio;
    }
  }
}

TEST(BlockMask, DeterministicPerSeed) {
  Rng a(77), b(77);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_block_mask(6, 5, 0.4, a).grid, sample_block_mask(6, 5, 0.4, b).grid);
}

TEST(RandomMask, ExactCount) {
  Rng rng(4);
  EXPECT_EQ(sample_random_mask(16, 0.0, rng).popcount(), 0u);
  EXPECT_EQ(sample_random_mask(16, 0.5, rng).popcount(), 8u);
  EXPECT_EQ(sample_random_mask(10, 0.33, rng).popcount(), 3u);
}

TEST(RandomMask, PositionFrequencyIsUniform) {
  Rng rng(5);
  std::vector<int> hits(16, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto m = sample_random_mask(16, 0.5, rng);
    for (std::size_t j = 0; j < 16; ++j) hits[j] += m.grid[j];
  }
  for (int h : hits) EXPECT_NEAR(double(h) / draws, 0.5, 0.02);
}

TEST(SampleMask, KindsAndParsing) {
  Rng rng(6);
  EXPECT_EQ(sample_mask(MaskKind::none, 4, 4, rng).popcount(), 0u);
  EXPECT_EQ(parse_mask_kind("block"), MaskKind::block);
  EXPECT_EQ(parse_mask_kind(to_string(MaskKind::random)), MaskKind::random);
  EXPECT_THROW(parse_mask_kind("checker"), ConfigError);
  MaskRatioParams always{0.0, 0.5, 0.5};
  EXPECT_EQ(sample_mask(MaskKind::random, 4, 4, rng, always).popcount(), 8u);
  EXPECT_EQ(sample_mask(MaskKind::block, 4, 4, rng, always).popcount(), 8u);
}
