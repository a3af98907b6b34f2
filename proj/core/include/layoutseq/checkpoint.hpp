#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "layoutseq/tensor.hpp"

namespace layoutseq {

/// Checkpoint container layout (all integers little-endian):
///
///   bytes 0..7    magic "LSEQCKPT"
///   bytes 8..11   u32 format version (currently 1)
///   bytes 12..19  u64 header length H
///   next H bytes  UTF-8 JSON header:
///                   {"format": "layoutseq-checkpoint", "version": 1,
///                    "step": <int>, "meta": <object>,
///                    "tensors": [{"name", "shape", "offset", "count"}, ...]}
///   payload       float32 values; tensor i starts at byte `offset` of the
///                 payload and holds `count` values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

struct Checkpoint {
  std::int64_t step = 0;
  std::vector<NamedArray> arrays;
  /// Free-form JSON object text stored in the header ("{}" when unused).
  std::string meta_json = "{}";

  const NamedArray* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace layoutseq
