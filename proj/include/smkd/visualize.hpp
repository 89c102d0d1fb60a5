#pragma once

// Attention heatmaps and dense-correspondence images written as binary PPM.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "smkd/losses.hpp"
#include "smkd/vit.hpp"

namespace smkd {

/// Interleaved 8-bit RGB raster.
struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(3 * w * h, 0) {}
  std::uint8_t* at(std::size_t x, std::size_t y) { return rgb.data() + 3 * (y * width + x); }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return rgb.data() + 3 * (y * width + x); }
};

/// P6 with maxval 255. Reading accepts comments and arbitrary header whitespace.
std::vector<std::uint8_t> encode_ppm(const RgbImage& img);
RgbImage decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_ppm(const std::filesystem::path& path);

/// Conversions to and from the planar [3, H, W] layout used by datasets.
RgbImage from_planar(std::span<const std::uint8_t> planar, std::size_t height, std::size_t width);
std::vector<std::uint8_t> to_planar(const RgbImage& img);

/// Bilinear resize to a square network input, returned planar.
std::vector<std::uint8_t> fit_to_input(const RgbImage& img, std::size_t size);

/// Distinct saturated color per attention head; the largest channel is 255.
std::array<std::uint8_t, 3> head_color(std::size_t head);

/// Last-layer [cls] attention of every head over the patch grid, [heads][N].
std::vector<std::vector<double>> cls_attention_per_head(const TokenSet<float>& ts);

/// One image per head: the head's attention min-max rescaled to [0, 255]
/// (a constant map is all zero), nearest-upsampled from the patch grid to
/// the image size and tinted with head_color.
std::vector<RgbImage> attention_heatmaps(const TokenSet<float>& ts, const VitConfig& cfg);

/// Center of a patch in pixel coordinates of the input image.
std::array<std::size_t, 2> patch_center(std::size_t patch, const VitConfig& cfg);

struct CorrespondenceLine {
  std::size_t query_patch = 0, match_patch = 0;
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // x1 already offset into the right half
};

struct Correspondence {
  RgbImage image;  // left and right inputs side by side
  std::vector<CorrespondenceLine> lines;
  MatchMap matches;  // full match of left patches into the right image
};

/// Matches every patch of the left image to the right image by cosine
/// similarity of patch tokens, then draws lines for the `top` left patches
/// with the highest [cls] attention (head mean, ties to the lower index).
Correspondence draw_correspondence(const VitParams<float>& backbone, const VitConfig& cfg,
                                   std::span<const std::uint8_t> left, std::span<const std::uint8_t> right,
                                   std::size_t top);

/// Forward pass of one planar u8 image under a frozen backbone.
TokenSet<float> encode_image(const VitParams<float>& backbone, const VitConfig& cfg,
                             std::span<const std::uint8_t> image);

}  // namespace smkd
