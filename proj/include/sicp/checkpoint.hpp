#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sicp/pipeline.hpp"

namespace sicp::checkpoint {

/// Layout (little-endian):
///   magic "SICPCKPT" | version u32 | architecture hash u64 | config hash u64 |
///   seed u64 | adam step u64 | adam lr f64 | blob count u32 |
///   blobs { name (u32 length + bytes) | kind u8 | count u64 | count x f64 } |
///   crc32 u32 over everything before it
/// Blob kinds: 0 parameter, 1 buffer, 2 adam first moment, 3 adam second moment.
inline constexpr std::uint32_t kVersion = 1;

struct Meta {
  std::uint64_t architecture_hash = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

std::vector<std::uint8_t> serialize(pipeline::Model& model, const pipeline::Adam* adam, std::uint64_t config_hash,
                                    std::uint64_t seed);

/// Loads values into an already-built model of the same architecture.
/// Throws IncompatibleCheckpoint on any architecture, name or size mismatch,
/// CorruptPayload on a bad checksum.
Meta restore(std::span<const std::uint8_t> bytes, pipeline::Model& model, pipeline::Adam* adam);

void save(const std::filesystem::path& path, pipeline::Model& model, const pipeline::Adam* adam,
          std::uint64_t config_hash, std::uint64_t seed);
/// Throws MissingCheckpoint when the file does not exist.
Meta load(const std::filesystem::path& path, pipeline::Model& model, pipeline::Adam* adam);

}  // namespace sicp::checkpoint
