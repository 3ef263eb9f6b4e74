#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tslformer/checkpoint.hpp"
#include "tslformer/segmentation.hpp"

namespace tslformer {

struct RankedClass {
  std::string name;
  int index = 0;
  double probability = 0;
};

/// impute -> sample -> clip tensor -> eval forward -> top-k names.
/// `timestamps` may be empty. Throws EmptyClip.
std::vector<RankedClass> infer_clip(std::span<const RawFrame> frames, std::span<const double> timestamps,
                                    const Checkpoint& checkpoint, const FrameSampler& sampler, std::size_t k);

std::vector<RankedClass> infer_clip(std::span<const RawFrame> frames, const Checkpoint& checkpoint,
                                    std::size_t k);

/// Parses one NDJSON stream record `{"ts": seconds, "features": [F numbers or nulls]}`.
/// `ts` is optional. Returns nullopt for malformed records.
std::optional<StreamFrame> parse_stream_record(std::string_view line, std::size_t feature_count);

struct StreamOptions {
  SegmenterConfig segmenter;
  std::optional<FrameSampler> sampler;  // defaults to the checkpoint's
  std::size_t top_k = 5;
};

struct StreamSummary {
  std::size_t frames = 0;
  std::size_t skipped = 0;
  std::size_t clips = 0;
};

/// Reads NDJSON frames from `in`, segments them, and writes one prediction
/// record per clip to `out`. Classification runs on a worker thread with
/// at most one clip in flight; predictions keep clip order.
StreamSummary run_stream(std::istream& in, std::ostream& out, const Checkpoint& checkpoint,
                         const StreamOptions& options);

}  // namespace tslformer
