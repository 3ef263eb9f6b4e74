#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tslformer/landmarks.hpp"
#include "tslformer/model.hpp"
#include "tslformer/training.hpp"

namespace tslformer {

/// Everything a `key = value` config file can set.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FrameSampler sampler;
  std::vector<std::string> keypoints = LandmarkLayout::standard().keypoint_names();
};

/// Flat `key = value` lines; `#` starts a comment. Keys are the field names
/// of ModelConfig and TrainConfig, plus `scheduler_factor`,
/// `scheduler_patience`, `scheduler_threshold`, `min_lr`, `sampler` and
/// `keypoints` (comma-separated). Unknown keys and bad values throw BadConfig.
void apply_config(std::istream& in, RunConfig& config);
void apply_config_file(const std::filesystem::path& path, RunConfig& config);

/// Inverse of apply_config for every key.
std::string to_config_text(const RunConfig& config);

}  // namespace tslformer
