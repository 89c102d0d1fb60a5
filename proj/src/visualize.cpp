#include "smkd/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "smkd/data.hpp"
#include "smkd/error.hpp"

namespace smkd {

std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(std::string("PPM ") + what + " is too large");
    }
    if (digits == 0) throw FormatError(std::string("PPM header lacks ") + what);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6) image");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0) throw FormatError("PPM image has zero size");
  if (maxval != 255) throw FormatError("PPM maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM header is malformed");
  ++pos;
  const std::size_t need = 3 * w * h;
  if (bytes.size() - pos < need)
    throw FormatError("PPM truncated: expected " + std::to_string(need) + " pixel bytes, got " +
                      std::to_string(bytes.size() - pos));
  RgbImage img(w, h);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), need, img.rgb.begin());
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

RgbImage from_planar(std::span<const std::uint8_t> planar, std::size_t height, std::size_t width) {
  if (planar.size() != 3 * height * width) throw DimensionError("planar image size does not match its dimensions");
  RgbImage img(width, height);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) img.at(x, y)[c] = planar[(c * height + y) * width + x];
  return img;
}

std::vector<std::uint8_t> to_planar(const RgbImage& img) {
  std::vector<std::uint8_t> out(img.rgb.size());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out[(c * img.height + y) * img.width + x] = img.at(x, y)[c];
  return out;
}

std::vector<std::uint8_t> fit_to_input(const RgbImage& img, std::size_t size) {
  auto planar = to_planar(img);
  if (img.width == size && img.height == size) return planar;
  std::vector<float> f(planar.begin(), planar.end());
  auto resized = resize_bilinear(f, 3, img.height, img.width, size, size);
  std::vector<std::uint8_t> out(resized.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(resized[i]), 0L, 255L));
  return out;
}

std::array<std::uint8_t, 3> head_color(std::size_t head) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> palette{{{255, 64, 64},
                                                                       {64, 255, 64},
                                                                       {64, 128, 255},
                                                                       {255, 220, 0},
                                                                       {255, 0, 255},
                                                                       {0, 255, 255},
                                                                       {255, 128, 0},
                                                                       {160, 96, 255}}};
  return palette[head % palette.size()];
}

TokenSet<float> encode_image(const VitParams<float>& backbone, const VitConfig& cfg,
                             std::span<const std::uint8_t> image) {
  const std::size_t s = cfg.image_size;
  if (image.size() != 3 * s * s)
    throw DimensionError("image has " + std::to_string(image.size()) + " bytes, model expects 3x" +
                         std::to_string(s) + "x" + std::to_string(s));
  StopGradient frozen;
  Tensor x({3, s, s}, normalize_image(image));
  return forward_one(patchify(x, cfg, backbone), cfg, backbone);
}

std::vector<std::vector<double>> cls_attention_per_head(const TokenSet<float>& ts) {
  const auto& shape = ts.attn.shape();
  const std::size_t depth = shape[0], heads = shape[1], t = shape[2];
  const auto a = ts.attn.data();
  std::vector<std::vector<double>> out(heads, std::vector<double>(t - 1));
  for (std::size_t h = 0; h < heads; ++h) {
    const float* row = a.data() + (((depth - 1) * heads + h) * t) * t;  // [cls] query row
    for (std::size_t j = 1; j < t; ++j) out[h][j - 1] = row[j];
  }
  return out;
}

std::vector<RgbImage> attention_heatmaps(const TokenSet<float>& ts, const VitConfig& cfg) {
  const auto maps = cls_attention_per_head(ts);
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
  std::vector<RgbImage> out;
  for (std::size_t h = 0; h < maps.size(); ++h) {
    const auto& m = maps[h];
    const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
    const double range = *hi - *lo;
    const auto color = head_color(h);
    RgbImage img(s, s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const std::size_t k = std::min(y / p, g - 1) * g + std::min(x / p, g - 1);
        const double level = range > 0 ? std::round(255.0 * (m[k] - *lo) / range) : 0.0;
        for (std::size_t c = 0; c < 3; ++c)
          img.at(x, y)[c] = static_cast<std::uint8_t>(std::lround(level * color[c] / 255.0));
      }
    out.push_back(std::move(img));
  }
  return out;
}

std::array<std::size_t, 2> patch_center(std::size_t patch, const VitConfig& cfg) {
  const std::size_t g = cfg.grid(), p = cfg.patch_size;
  return {(patch % g) * p + p / 2, (patch / g) * p + p / 2};
}

namespace {

void draw_line(RgbImage& img, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1,
               std::array<std::uint8_t, 3> color) {
  long x = static_cast<long>(x0), y = static_cast<long>(y0);
  const long tx = static_cast<long>(x1), ty = static_cast<long>(y1);
  const long dx = std::abs(tx - x), dy = -std::abs(ty - y);
  const long sx = x < tx ? 1 : -1, sy = y < ty ? 1 : -1;
  long err = dx + dy;
  while (true) {
    std::copy(color.begin(), color.end(), img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)));
    if (x == tx && y == ty) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
}

}  // namespace

Correspondence draw_correspondence(const VitParams<float>& backbone, const VitConfig& cfg,
                                   std::span<const std::uint8_t> left, std::span<const std::uint8_t> right,
                                   std::size_t top) {
  const auto a = encode_image(backbone, cfg, left);
  const auto b = encode_image(backbone, cfg, right);
  Correspondence out;
  out.matches = match_patches(a.patches, b.patches);

  const auto weights = cls_attention_weights(a).to_vector();
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return weights[i] > weights[j]; });
  order.resize(std::min(top, order.size()));

  const std::size_t s = cfg.image_size;
  out.image = RgbImage(2 * s, s);
  const auto li = from_planar(left, s, s), ri = from_planar(right, s, s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      std::copy_n(li.at(x, y), 3, out.image.at(x, y));
      std::copy_n(ri.at(x, y), 3, out.image.at(x + s, y));
    }
  for (std::size_t i = 0; i < order.size(); ++i) {
    CorrespondenceLine line;
    line.query_patch = order[i];
    line.match_patch = out.matches.k_plus[order[i]];
    const auto from = patch_center(line.query_patch, cfg), to = patch_center(line.match_patch, cfg);
    line.x0 = from[0];
    line.y0 = from[1];
    line.x1 = to[0] + s;
    line.y1 = to[1];
    draw_line(out.image, line.x0, line.y0, line.x1, line.y1, head_color(i));
    out.lines.push_back(line);
  }
  return out;
}

}  // namespace smkd
