#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <vector>

namespace tslformer {

using RawFrame = std::vector<std::optional<float>>;

/// Mean Euclidean XYZ displacement over keypoints detected in both frames;
/// 0 when no keypoint is shared.
double frame_displacement(std::span<const std::optional<float>> from, std::span<const std::optional<float>> to);

/// One displacement per consecutive pair. Throws TooFewFrames below 2 frames.
std::vector<double> motion_signal(std::span<const RawFrame> frames);

struct SegmenterConfig {
  double start_threshold = 0.01;
  double stop_threshold = 0.004;
  int start_hold = 3;
  int stop_hold = 10;
  int max_clip_frames = 150;

  /// Throws BadConfig.
  void validate() const;
};

struct StreamFrame {
  RawFrame features;
  std::optional<double> timestamp;
};

struct Segment {
  std::size_t first_frame = 0;  // position in the accepted frame stream
  std::size_t last_frame = 0;   // inclusive
  std::vector<StreamFrame> frames;
};

/// Motion-triggered clip recorder.
///
/// IDLE -> RECORDING once `start_hold` consecutive transitions reach
/// `start_threshold`; the clip then begins at the frame before the first of
/// those transitions. RECORDING -> IDLE after `stop_hold` consecutive
/// transitions below `stop_threshold` (the trailing still frames are
/// dropped) or when the clip holds `max_clip_frames` frames. Buffering never
/// exceeds max(max_clip_frames, start_hold + 1) frames.
class Segmenter {
 public:
  Segmenter(SegmenterConfig config, std::size_t feature_count);

  /// Frames of the wrong width are counted and ignored.
  std::optional<Segment> push(StreamFrame frame);
  /// Emits the clip in progress, if any, at end of stream.
  std::optional<Segment> finish();

  bool recording() const noexcept { return recording_; }
  std::size_t skipped_frames() const noexcept { return skipped_; }
  std::size_t buffered_frames() const noexcept { return history_.size() + clip_.size(); }
  double last_motion() const noexcept { return last_motion_; }

 private:
  Segment emit(std::size_t drop_tail);

  SegmenterConfig config_;
  std::size_t feature_count_;
  std::optional<RawFrame> previous_;
  std::size_t next_index_ = 0;
  bool recording_ = false;
  int moving_run_ = 0;
  int still_run_ = 0;
  std::deque<StreamFrame> history_;  // IDLE look-back, at most start_hold + 1
  std::vector<StreamFrame> clip_;
  std::size_t clip_first_ = 0;
  std::size_t skipped_ = 0;
  double last_motion_ = 0;
};

/// Runs a Segmenter over a finished stream, including the end-of-stream flush.
std::vector<Segment> segment_stream(std::span<const StreamFrame> frames, const SegmenterConfig& config,
                                    std::size_t feature_count);

}  // namespace tslformer
