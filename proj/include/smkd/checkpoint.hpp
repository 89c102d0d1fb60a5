#pragma once

// Binary checkpoints: magic "SMKD", u32 LE format version, u64 LE header
// length, a UTF-8 JSON header describing every array and the scalar state,
// then the arrays as concatenated little-endian f32 values.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "smkd/trainer.hpp"

namespace smkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelPair model;
  AdamW optimizer;
  std::uint64_t config_hash = 0;
  std::string config_text;
};

/// Array names in file order: student.*, teacher.*, center.cls, center.patch,
/// then ce.w / ce.b when present, then optimizer moments opt.m.* / opt.v.*.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);

struct LoadOptions {
  std::optional<std::uint64_t> expected_hash;
  bool strict = false;  // hash mismatch is an error rather than a warning
};

struct LoadResult {
  Checkpoint checkpoint;
  std::vector<std::string> warnings;
};

/// Throws FormatError on bad magic or version, truncation (naming expected and
/// actual sizes) or an inconsistent header; ConfigError on a hash mismatch in
/// strict mode.
LoadResult decode_checkpoint(const std::vector<std::uint8_t>& bytes, const LoadOptions& options = {});

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
LoadResult load_checkpoint(const std::filesystem::path& path, const LoadOptions& options = {});

/// Byte offset and length of each array's payload, in file order.
struct ArrayExtent {
  std::string name;
  std::size_t offset = 0, bytes = 0;
};
std::vector<ArrayExtent> checkpoint_layout(const std::vector<std::uint8_t>& bytes);

}  // namespace smkd
