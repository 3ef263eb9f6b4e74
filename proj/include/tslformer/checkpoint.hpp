#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tslformer/landmarks.hpp"
#include "tslformer/model.hpp"

namespace tslformer {

inline constexpr int kCheckpointVersion = 1;

/// A trained model plus everything needed to feed it.
///
/// On disk: a line-oriented text manifest (`key=value`, terminated by a
/// line `end`) followed by the raw payload, every parameter tensor as
/// little-endian IEEE-754 binary32 in manifest order. The manifest records
/// the payload length and its CRC-32.
struct Checkpoint {
  ModelConfig config;
  ClassVocabulary vocabulary;
  std::vector<std::string> keypoints;  // layout the model was trained on
  FrameSampler sampler;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> metrics;
  ModelParams<float> params;

  LandmarkLayout layout() const { return LandmarkLayout(keypoints); }
};

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
/// Throws VersionMismatch, TruncatedFile, CorruptPayload.
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const unsigned char> bytes);

}  // namespace tslformer
