#pragma once

// Flat `key = value` experiment configuration with `#` comments.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "smkd/fewshot.hpp"
#include "smkd/head.hpp"
#include "smkd/trainer.hpp"
#include "smkd/vit.hpp"

namespace smkd {

/// Raw parsed entries. Every key remembers its line for error messages.
class ConfigFile {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };

  /// Throws ConfigError naming the line on malformed or duplicate entries.
  static ConfigFile parse(const std::string& text, const std::string& source = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  const std::string& source() const { return source_; }
  const std::string& text() const { return text_; }

  void set(const std::string& key, const std::string& value);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ConfigError naming the key when it is absent.
  void require(const std::string& key) const;

  /// "source:line: key 'k' ..." prefix used in messages.
  std::string where(const std::string& key) const;

 private:
  std::string source_, text_;
  std::map<std::string, Entry> entries_;
};

enum class DatasetKind { synthetic, cifar10, cifar100 };

struct DataConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::filesystem::path path;        // CIFAR binary file
  std::filesystem::path split_file;  // optional; contiguous split otherwise
  SyntheticOptions synthetic;
  std::size_t split_base = 6, split_val = 1;
};

struct ExperimentConfig {
  VitConfig vit;
  HeadConfig head;
  TrainConfig train;
  DataConfig data;
  EvalOptions eval;
  std::vector<FeatureMode> eval_modes;
  std::vector<EvalMethod> eval_methods;
  std::size_t workers = 1;
  std::filesystem::path out_dir = "runs";
  std::string text;  // file contents as read, embedded in checkpoints
};

/// Keys that every config must set.
const std::vector<std::string>& required_config_keys();

/// Builds the experiment from parsed entries. Unknown keys and malformed
/// values raise ConfigError naming the key and line.
ExperimentConfig build_experiment(const ConfigFile& file);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Stable 64-bit hash of every architecture-defining value (backbone and head
/// shapes). Checkpoints record it so a mismatched config is detected on load.
std::uint64_t architecture_hash(const VitConfig& vit, const HeadConfig& head);
std::string hash_hex(std::uint64_t h);

/// Resolves the configured dataset and split.
struct LoadedData {
  LabeledDataset all;
  ClassSplit split;
  std::vector<std::size_t> base_indices;  // training images (base classes)
  LabeledDataset novel;                   // evaluation images
};
LoadedData load_data(const DataConfig& cfg);

}  // namespace smkd
