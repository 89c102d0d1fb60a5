#pragma once

// Labeled image datasets: procedural synthetic classes, CIFAR-style binary
// records, class split files, and random view augmentation.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "smkd/random.hpp"

namespace smkd {

enum class Split { base, val, novel };

/// u8 RGB images stored planar per image: [n, 3, H, W].
struct LabeledDataset {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;         // fine labels
  std::vector<int> coarse_labels;  // CIFAR-100 records only; empty otherwise
  std::vector<std::string> class_names;

  static constexpr std::size_t channels = 3;
  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return channels * height * width; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
  /// Number of classes (max label + 1, or class_names.size() if larger).
  std::size_t num_classes() const;
};

/// Keeps only images whose label is in `classes`. Labels are left unchanged.
LabeledDataset select_classes(const LabeledDataset& ds, std::span<const int> classes);

/// Indices of images per label, for labels 0..num_classes-1.
std::vector<std::vector<std::size_t>> index_by_class(std::span<const int> labels, std::size_t num_classes);

// ---- synthetic ----------------------------------------------------------------

struct SyntheticOptions {
  std::size_t n_classes = 12;
  std::size_t per_class = 200;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

/// Each class combines a shared hue family, an oriented stripe pattern of
/// class-specific frequency, and a class-specific blob layout. Every image
/// draws its own phase, blob jitter, brightness and pixel noise.
LabeledDataset generate_synthetic(const SyntheticOptions& opts);

// ---- CIFAR binary ---------------------------------------------------------------

enum class CifarVariant { cifar10, cifar100 };

std::size_t cifar_record_size(CifarVariant v);
LabeledDataset decode_cifar(std::span<const std::uint8_t> bytes, CifarVariant v);
std::vector<std::uint8_t> encode_cifar(const LabeledDataset& ds, CifarVariant v);
LabeledDataset load_cifar_binary(const std::filesystem::path& path, CifarVariant v);
void save_cifar_binary(const std::filesystem::path& path, const LabeledDataset& ds, CifarVariant v);
CifarVariant parse_cifar_variant(const std::string& name);

// ---- class splits ----------------------------------------------------------------

struct ClassSplit {
  std::vector<int> base, val, novel;

  const std::vector<int>& classes(Split s) const;
  /// Throws FormatError if a class appears in more than one section.
  void validate() const;
};

/// Lines `#base`, `#val`, `#novel` open sections; other non-empty lines hold
/// one integer class index each.
ClassSplit parse_split(const std::string& text);
std::string format_split(const ClassSplit& split);
ClassSplit load_split_file(const std::filesystem::path& path);

/// The first n_base classes, the next n_val, then the rest.
ClassSplit contiguous_split(std::size_t n_classes, std::size_t n_base, std::size_t n_val);

// ---- augmentation ------------------------------------------------------------------

struct AugmentParams {
  std::size_t out_size = 32;
  double scale_lo = 0.4, scale_hi = 1.0;
  double ratio_lo = 3.0 / 4.0, ratio_hi = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.3, contrast = 0.3, saturation = 0.2;
  double blur_prob = 0.1;

  /// Throws ParameterError for probabilities outside [0, 1] or a scale range outside (0, 1].
  void validate() const;
  /// No randomness: full-image crop, no flip, jitter or blur.
  static AugmentParams identity(std::size_t out_size);
};

/// Per-channel normalization applied to every network input.
inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;

/// Converts a u8 image [3, H, W] into normalized floats.
std::vector<float> normalize_image(std::span<const std::uint8_t> image);

/// Random resized crop, horizontal flip, color jitter and blur on a u8 image
/// [3, size, size]; returns a normalized float view [3, out_size, out_size].
std::vector<float> augment(std::span<const std::uint8_t> image, std::size_t size, const AugmentParams& params,
                           Rng& rng);

/// Bilinear resize of a float image [c, h, w] to [c, oh, ow] (half-pixel centers).
std::vector<float> resize_bilinear(std::span<const float> image, std::size_t c, std::size_t h, std::size_t w,
                                   std::size_t oh, std::size_t ow);

}  // namespace smkd
