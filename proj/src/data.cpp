#include "smkd/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include "smkd/error.hpp"

namespace smkd {

std::size_t LabeledDataset::num_classes() const {
  int hi = -1;
  for (int l : labels) hi = std::max(hi, l);
  return std::max(class_names.size(), static_cast<std::size_t>(hi + 1));
}

LabeledDataset select_classes(const LabeledDataset& ds, std::span<const int> classes) {
  const std::set<int> keep(classes.begin(), classes.end());
  LabeledDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.class_names = ds.class_names;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!keep.count(ds.labels[i])) continue;
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
    if (!ds.coarse_labels.empty()) out.coarse_labels.push_back(ds.coarse_labels[i]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> index_by_class(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> out(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw FormatError("label " + std::to_string(labels[i]) + " out of range");
    out[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  return out;
}

// ---- synthetic ----------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double x = h * 6.0;
  const int sector = static_cast<int>(x) % 6;
  const double f = x - std::floor(x);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Blob {
  double y, x, radius;
};

struct ClassRecipe {
  double hue;
  double angle;
  double freq;  // stripe cycles across the image
  std::vector<Blob> blobs;
};

ClassRecipe make_recipe(std::size_t c, std::uint64_t seed, double size) {
  Rng rng(derive_seed(seed, c, 0));
  ClassRecipe r;
  // Three hue families shared across classes, so mean color alone cannot separate them.
  r.hue = double(c % 3) / 3.0 + 0.04 * uniform01(rng);
  r.angle = std::numbers::pi * std::fmod(double(c) * 0.381966 + 0.1 * uniform01(rng), 1.0);
  r.freq = 1.5 + 3.5 * std::fmod(double(c) * 0.618034 + 0.1 * uniform01(rng), 1.0);
  const std::size_t n_blobs = 1 + c % 3;
  for (std::size_t b = 0; b < n_blobs; ++b)
    r.blobs.push_back({size * (0.15 + 0.7 * uniform01(rng)), size * (0.15 + 0.7 * uniform01(rng)),
                       size * (0.08 + 0.08 * uniform01(rng))});
  return r;
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

LabeledDataset generate_synthetic(const SyntheticOptions& o) {
  if (o.n_classes == 0 || o.per_class == 0 || o.image_size == 0)
    throw ParameterError("generate_synthetic: counts and image size must be positive");
  LabeledDataset ds;
  ds.height = ds.width = o.image_size;
  const std::size_t S = o.image_size, plane = S * S;
  ds.pixels.resize(o.n_classes * o.per_class * 3 * plane);
  const double size = double(S);
  std::size_t idx = 0;
  for (std::size_t c = 0; c < o.n_classes; ++c) {
    ds.class_names.push_back("synthetic_" + std::to_string(c));
    const ClassRecipe recipe = make_recipe(c, o.seed, size);
    for (std::size_t i = 0; i < o.per_class; ++i, ++idx) {
      Rng rng(derive_seed(o.seed, c, 1 + i));
      const double phase = 2 * std::numbers::pi * uniform01(rng);
      const double angle = recipe.angle + 0.15 * (uniform01(rng) - 0.5);
      const double hue = recipe.hue + 0.08 * (uniform01(rng) - 0.5);
      const double sat = 0.45 + 0.45 * uniform01(rng);
      const double val = 0.55 + 0.45 * uniform01(rng);
      const Rgb blob_color = hsv(hue + 0.5, sat, val);
      std::vector<Blob> blobs = recipe.blobs;
      for (auto& b : blobs) {
        b.y += 0.1 * size * (uniform01(rng) - 0.5);
        b.x += 0.1 * size * (uniform01(rng) - 0.5);
      }
      std::normal_distribution<double> noise(0.0, 0.04);
      const double cs = std::cos(angle), sn = std::sin(angle);
      std::uint8_t* out = ds.pixels.data() + idx * 3 * plane;
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double u = (double(x) * cs + double(y) * sn) / size;
          const double t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * recipe.freq * u + phase);
          Rgb px = hsv(hue, sat, val * (0.3 + 0.7 * t));
          for (const auto& b : blobs) {
            const double dy = double(y) + 0.5 - b.y, dx = double(x) + 0.5 - b.x;
            const double a = std::exp(-(dy * dy + dx * dx) / (2 * b.radius * b.radius));
            px.r += a * (blob_color.r - px.r);
            px.g += a * (blob_color.g - px.g);
            px.b += a * (blob_color.b - px.b);
          }
          out[0 * plane + y * S + x] = to_u8(px.r + noise(rng));
          out[1 * plane + y * S + x] = to_u8(px.g + noise(rng));
          out[2 * plane + y * S + x] = to_u8(px.b + noise(rng));
        }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

// ---- CIFAR binary ---------------------------------------------------------------

namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;

}  // namespace

std::size_t cifar_record_size(CifarVariant v) { return (v == CifarVariant::cifar10 ? 1 : 2) + kCifarPixels; }

CifarVariant parse_cifar_variant(const std::string& name) {
  if (name == "cifar10") return CifarVariant::cifar10;
  if (name == "cifar100") return CifarVariant::cifar100;
  throw ConfigError("unknown CIFAR variant '" + name + "' (expected cifar10 or cifar100)");
}

LabeledDataset decode_cifar(std::span<const std::uint8_t> bytes, CifarVariant v) {
  const std::size_t rec = cifar_record_size(v), header = rec - kCifarPixels;
  if (bytes.size() % rec != 0) {
    const std::size_t offset = bytes.size() / rec * rec;
    throw FormatError("CIFAR data: partial record at offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " of " + std::to_string(rec) + " bytes)");
  }
  LabeledDataset ds;
  ds.height = ds.width = 32;
  const std::size_t n = bytes.size() / rec;
  ds.pixels.reserve(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    if (v == CifarVariant::cifar100) {
      ds.coarse_labels.push_back(r[0]);
      ds.labels.push_back(r[1]);
    } else {
      if (r[0] > 9)
        throw FormatError("CIFAR-10 data: label " + std::to_string(r[0]) + " at offset " + std::to_string(i * rec));
      ds.labels.push_back(r[0]);
    }
    ds.pixels.insert(ds.pixels.end(), r + header, r + rec);
  }
  return ds;
}

std::vector<std::uint8_t> encode_cifar(const LabeledDataset& ds, CifarVariant v) {
  if (ds.size() > 0 && (ds.height != 32 || ds.width != 32))
    throw FormatError("CIFAR records hold 32x32 images only");
  if (v == CifarVariant::cifar100 && ds.coarse_labels.size() != ds.size())
    throw FormatError("CIFAR-100 encoding needs one coarse label per image");
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * cifar_record_size(v));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (v == CifarVariant::cifar100) out.push_back(static_cast<std::uint8_t>(ds.coarse_labels[i]));
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    const auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

LabeledDataset load_cifar_binary(const std::filesystem::path& path, CifarVariant v) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open CIFAR file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_cifar(bytes, v);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_cifar_binary(const std::filesystem::path& path, const LabeledDataset& ds, CifarVariant v) {
  const auto bytes = encode_cifar(ds, v);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---- class splits ----------------------------------------------------------------

const std::vector<int>& ClassSplit::classes(Split s) const {
  switch (s) {
    case Split::base: return base;
    case Split::val: return val;
    case Split::novel: return novel;
  }
  return base;
}

void ClassSplit::validate() const {
  std::set<int> seen;
  for (const auto* section : {&base, &val, &novel})
    for (int c : *section)
      if (!seen.insert(c).second) throw FormatError("class " + std::to_string(c) + " appears in more than one split");
}

ClassSplit parse_split(const std::string& text) {
  ClassSplit split;
  std::vector<int>* current = nullptr;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string tok = line.substr(first, last - first + 1);
    if (tok == "#base") {
      current = &split.base;
    } else if (tok == "#val") {
      current = &split.val;
    } else if (tok == "#novel") {
      current = &split.novel;
    } else {
      int value = 0;
      auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || value < 0)
        throw FormatError("split file line " + std::to_string(lineno) + ": expected a class index, got '" + tok + "'");
      if (!current)
        throw FormatError("split file line " + std::to_string(lineno) + ": class index before any section header");
      current->push_back(value);
    }
  }
  split.validate();
  return split;
}

std::string format_split(const ClassSplit& split) {
  std::string out;
  auto section = [&](const char* name, const std::vector<int>& v) {
    out += name;
    out += '\n';
    for (int c : v) out += std::to_string(c) + '\n';
  };
  section("#base", split.base);
  section("#val", split.val);
  section("#novel", split.novel);
  return out;
}

ClassSplit load_split_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open split file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_split(ss.str());
}

ClassSplit contiguous_split(std::size_t n_classes, std::size_t n_base, std::size_t n_val) {
  if (n_base + n_val >= n_classes) throw ParameterError("split leaves no novel classes");
  ClassSplit s;
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto& dst = c < n_base ? s.base : c < n_base + n_val ? s.val : s.novel;
    dst.push_back(static_cast<int>(c));
  }
  return s;
}

// ---- augmentation ------------------------------------------------------------------

void AugmentParams::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0 && p <= 1)) throw ParameterError(std::string("augment: ") + name + " must lie in [0, 1]");
  };
  prob(flip_prob, "flip_prob");
  prob(jitter_prob, "jitter_prob");
  prob(blur_prob, "blur_prob");
  if (!(scale_lo > 0 && scale_lo <= scale_hi && scale_hi <= 1))
    throw ParameterError("augment: scale range must satisfy 0 < lo <= hi <= 1");
  if (!(ratio_lo > 0 && ratio_lo <= ratio_hi)) throw ParameterError("augment: invalid aspect ratio range");
  if (out_size == 0) throw ParameterError("augment: out_size must be positive");
}

AugmentParams AugmentParams::identity(std::size_t out_size) {
  AugmentParams p;
  p.out_size = out_size;
  p.scale_lo = p.scale_hi = 1.0;
  p.flip_prob = p.jitter_prob = p.blur_prob = 0.0;
  return p;
}

std::vector<float> normalize_image(std::span<const std::uint8_t> image) {
  std::vector<float> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = (float(image[i]) / 255.0f - kPixelMean) / kPixelStd;
  return out;
}

std::vector<float> resize_bilinear(std::span<const float> img, std::size_t c, std::size_t h, std::size_t w,
                                   std::size_t oh, std::size_t ow) {
  auto taps = [](std::size_t from, std::size_t to) {
    std::vector<std::tuple<std::size_t, std::size_t, float>> t(to);
    for (std::size_t i = 0; i < to; ++i) {
      double src = (double(i) + 0.5) * double(from) / double(to) - 0.5;
      src = std::clamp(src, 0.0, double(from - 1));
      const auto i0 = static_cast<std::size_t>(src);
      t[i] = {i0, std::min(i0 + 1, from - 1), static_cast<float>(src - double(i0))};
    }
    return t;
  };
  const auto ty = taps(h, oh), tx = taps(w, ow);
  std::vector<float> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* src = img.data() + ch * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto [y0, y1, fy] = ty[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto [x0, x1, fx] = tx[x];
        const float top = fx == 0.0f ? src[y0 * w + x0] : src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
        const float bot = fx == 0.0f ? src[y1 * w + x0] : src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
        out[(ch * oh + y) * ow + x] = fy == 0.0f ? top : top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

namespace {

void color_jitter(std::vector<float>& x, std::size_t plane, const AugmentParams& p, Rng& rng) {
  auto factor = [&](double strength) {
    return static_cast<float>(std::uniform_real_distribution<double>(1 - strength, 1 + strength)(rng));
  };
  const float b = factor(p.brightness), c = factor(p.contrast), s = factor(p.saturation);
  for (auto& v : x) v *= b;
  double mean = 0;
  for (std::size_t i = 0; i < plane; ++i) mean += 0.299 * x[i] + 0.587 * x[plane + i] + 0.114 * x[2 * plane + i];
  const float m = static_cast<float>(mean / double(plane));
  for (auto& v : x) v = (v - m) * c + m;
  for (std::size_t i = 0; i < plane; ++i) {
    const float gray = 0.299f * x[i] + 0.587f * x[plane + i] + 0.114f * x[2 * plane + i];
    for (std::size_t ch = 0; ch < 3; ++ch) x[ch * plane + i] = gray + (x[ch * plane + i] - gray) * s;
  }
  for (auto& v : x) v = std::clamp(v, 0.0f, 1.0f);
}

void gaussian_blur3(std::vector<float>& x, std::size_t s, double sigma) {
  const double e = std::exp(-1.0 / (2 * sigma * sigma));
  const float k0 = static_cast<float>(1.0 / (1 + 2 * e)), k1 = static_cast<float>(e / (1 + 2 * e));
  std::vector<float> tmp(x.size());
  for (std::size_t ch = 0; ch < 3; ++ch) {
    float* img = x.data() + ch * s * s;
    float* t = tmp.data() + ch * s * s;
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t i = 0; i < s; ++i)
        t[y * s + i] = k0 * img[y * s + i] + k1 * (img[y * s + (i ? i - 1 : 0)] + img[y * s + std::min(i + 1, s - 1)]);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t i = 0; i < s; ++i)
        img[y * s + i] = k0 * t[y * s + i] + k1 * (t[(y ? y - 1 : 0) * s + i] + t[std::min(y + 1, s - 1) * s + i]);
  }
}

}  // namespace

std::vector<float> augment(std::span<const std::uint8_t> image, std::size_t size, const AugmentParams& p, Rng& rng) {
  if (image.size() != 3 * size * size) throw DimensionError("augment: image is not [3, size, size]");
  const double area = double(size * size);
  const double log_lo = std::log(p.ratio_lo), log_hi = std::log(p.ratio_hi);
  std::size_t cw = size, ch = size, x0 = 0, y0 = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * std::uniform_real_distribution<double>(p.scale_lo, p.scale_hi)(rng);
    const double ratio = std::exp(std::uniform_real_distribution<double>(log_lo, log_hi)(rng));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w == 0 || h == 0 || w > size || h > size) continue;
    cw = w;
    ch = h;
    x0 = std::uniform_int_distribution<std::size_t>(0, size - w)(rng);
    y0 = std::uniform_int_distribution<std::size_t>(0, size - h)(rng);
    break;
  }
  std::vector<float> crop(3 * ch * cw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x)
        crop[(c * ch + y) * cw + x] = float(image[(c * size + y0 + y) * size + x0 + x]) / 255.0f;
  const std::size_t s = p.out_size, plane = s * s;
  std::vector<float> out = resize_bilinear(crop, 3, ch, cw, s, s);
  if (uniform01(rng) < p.flip_prob)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < s; ++y) std::reverse(out.begin() + (c * s + y) * s, out.begin() + (c * s + y + 1) * s);
  if (uniform01(rng) < p.jitter_prob) color_jitter(out, plane, p, rng);
  if (uniform01(rng) < p.blur_prob) gaussian_blur3(out, s, std::uniform_real_distribution<double>(0.1, 1.0)(rng));
  for (auto& v : out) v = (v - kPixelMean) / kPixelStd;
  return out;
}

}  // namespace smkd
