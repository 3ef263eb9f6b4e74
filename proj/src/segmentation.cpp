#include "tslformer/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tslformer/error.hpp"

namespace tslformer {

double frame_displacement(std::span<const std::optional<float>> from, std::span<const std::optional<float>> to) {
  if (from.size() != to.size() || from.size() % 3 != 0) {
    throw Error(ErrorCode::DimensionMismatch, "frames differ in width or are not XYZ triples");
  }
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < from.size(); k += 3) {
    bool present = true;
    for (std::size_t a = 0; a < 3; ++a) present = present && from[k + a] && to[k + a];
    if (!present) continue;
    double sq = 0;
    for (std::size_t a = 0; a < 3; ++a) {
      double delta = static_cast<double>(*to[k + a]) - static_cast<double>(*from[k + a]);
      sq += delta * delta;
    }
    total += std::sqrt(sq);
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

std::vector<double> motion_signal(std::span<const RawFrame> frames) {
  if (frames.size() < 2) {
    throw Error(ErrorCode::TooFewFrames, "motion needs at least two frames, got " + std::to_string(frames.size()));
  }
  std::vector<double> signal;
  signal.reserve(frames.size() - 1);
  for (std::size_t i = 1; i < frames.size(); ++i) signal.push_back(frame_displacement(frames[i - 1], frames[i]));
  return signal;
}

void SegmenterConfig::validate() const {
  if (!(stop_threshold <= start_threshold)) throw Error(ErrorCode::BadConfig, "stop_threshold must not exceed start_threshold");
  if (!(stop_threshold >= 0)) throw Error(ErrorCode::BadConfig, "thresholds must be non-negative");
  if (start_hold < 1 || stop_hold < 1) throw Error(ErrorCode::BadConfig, "holds must be at least 1 frame");
  if (max_clip_frames < 2) throw Error(ErrorCode::BadConfig, "max_clip_frames must be at least 2");
}

Segmenter::Segmenter(SegmenterConfig config, std::size_t feature_count)
    : config_(config), feature_count_(feature_count) {
  config_.validate();
  if (feature_count_ == 0 || feature_count_ % 3 != 0) {
    throw Error(ErrorCode::BadConfig, "feature count must be a positive multiple of 3");
  }
}

std::optional<Segment> Segmenter::push(StreamFrame frame) {
  if (frame.features.size() != feature_count_) {
    ++skipped_;
    return std::nullopt;
  }
  const std::size_t index = next_index_++;
  double motion = 0;
  const bool has_transition = previous_.has_value();
  if (has_transition) motion = frame_displacement(*previous_, frame.features);
  previous_ = frame.features;
  last_motion_ = motion;

  const auto look_back = static_cast<std::size_t>(config_.start_hold) + 1;
  const auto cap = static_cast<std::size_t>(config_.max_clip_frames);

  if (!recording_) {
    moving_run_ = has_transition && motion >= config_.start_threshold ? moving_run_ + 1 : 0;
    history_.push_back(std::move(frame));
    while (history_.size() > look_back) history_.pop_front();
    if (moving_run_ < config_.start_hold) return std::nullopt;
    recording_ = true;
    moving_run_ = 0;
    still_run_ = 0;
    clip_.assign(std::make_move_iterator(history_.begin()), std::make_move_iterator(history_.end()));
    history_.clear();
    if (clip_.size() > cap) clip_.erase(clip_.begin(), clip_.end() - static_cast<std::ptrdiff_t>(cap));
    clip_first_ = index + 1 - clip_.size();
    if (clip_.size() >= cap) return emit(0);
    return std::nullopt;
  }

  clip_.push_back(std::move(frame));
  still_run_ = motion < config_.stop_threshold ? still_run_ + 1 : 0;
  if (still_run_ >= config_.stop_hold) {
    StreamFrame last = clip_.back();
    Segment segment = emit(static_cast<std::size_t>(config_.stop_hold));
    history_.push_back(std::move(last));
    return segment;
  }
  if (clip_.size() >= cap) return emit(0);
  return std::nullopt;
}

std::optional<Segment> Segmenter::finish() {
  if (!recording_ || clip_.empty()) return std::nullopt;
  auto drop = std::min(static_cast<std::size_t>(still_run_), clip_.size() - 1);
  return emit(drop);
}

Segment Segmenter::emit(std::size_t drop_tail) {
  Segment segment;
  segment.first_frame = clip_first_;
  const std::size_t keep = clip_.size() - drop_tail;
  segment.frames.assign(std::make_move_iterator(clip_.begin()),
                        std::make_move_iterator(clip_.begin() + static_cast<std::ptrdiff_t>(keep)));
  segment.last_frame = clip_first_ + keep - 1;
  clip_.clear();
  recording_ = false;
  still_run_ = 0;
  moving_run_ = 0;
  return segment;
}

std::vector<Segment> segment_stream(std::span<const StreamFrame> frames, const SegmenterConfig& config,
                                    std::size_t feature_count) {
  Segmenter segmenter(config, feature_count);
  std::vector<Segment> out;
  for (const auto& f : frames) {
    if (auto s = segmenter.push(f)) out.push_back(std::move(*s));
  }
  if (auto s = segmenter.finish()) out.push_back(std::move(*s));
  return out;
}

}  // namespace tslformer
