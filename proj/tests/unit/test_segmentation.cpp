#include <gtest/gtest.h>

#include <algorithm>
#include <functional>

#include "tslformer/error.hpp"
#include "tslformer/rng.hpp"
#include "tslformer/segmentation.hpp"

using namespace tslformer;

namespace {

constexpr std::size_t kFeatures = 144;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::Io;
}

RawFrame pose_at(double shift_x) {
  RawFrame f(kFeatures);
  for (std::size_t k = 0; k < kFeatures / 3; ++k) {
    f[3 * k] = static_cast<float>(0.3 + 0.005 * static_cast<double>(k) + shift_x);
    f[3 * k + 1] = static_cast<float>(0.5 - 0.003 * static_cast<double>(k));
    f[3 * k + 2] = 0.0f;
  }
  return f;
}

// `still_before` frames at rest, `moving` frames each shifted `step` further, `still_after` at rest again.
std::vector<StreamFrame> burst(int still_before, int moving, int still_after, double step = 0.02) {
  std::vector<StreamFrame> frames;
  double x = 0;
  for (int i = 0; i < still_before; ++i) frames.push_back({pose_at(x), std::nullopt});
  for (int i = 0; i < moving; ++i) {
    x += step;
    frames.push_back({pose_at(x), std::nullopt});
  }
  for (int i = 0; i < still_after; ++i) frames.push_back({pose_at(x), std::nullopt});
  return frames;
}

bool same_frame(const StreamFrame& a, const StreamFrame& b) { return a.features == b.features && a.timestamp == b.timestamp; }

}  // namespace

TEST(Displacement, UniformTranslation) {
  auto a = pose_at(0);
  auto b = pose_at(0.03);
  EXPECT_NEAR(frame_displacement(a, b), 0.03, 1e-6);
}

TEST(Displacement, SingleMovingKeypointIsAveraged) {
  auto a = pose_at(0);
  auto b = a;
  b[0] = *b[0] + 0.48f;
  EXPECT_NEAR(frame_displacement(a, b), 0.01, 1e-6);
}

TEST(Displacement, MissingKeypointsAreIgnored) {
  RawFrame a = {0.f, 0.f, 0.f, 1.f, 1.f, 1.f};
  RawFrame b = {3.f, 4.f, 0.f, std::nullopt, 1.f, 1.f};
  EXPECT_DOUBLE_EQ(frame_displacement(a, b), 5.0);
  RawFrame none = {std::nullopt, 0.f, 0.f, std::nullopt, 1.f, 1.f};
  EXPECT_DOUBLE_EQ(frame_displacement(a, none), 0.0);
  EXPECT_EQ(code_of([&] { frame_displacement(a, RawFrame(3)); }), ErrorCode::DimensionMismatch);
}

TEST(MotionSignal, OneValuePerTransition) {
  std::vector<RawFrame> frames = {pose_at(0), pose_at(0.01), pose_at(0.03)};
  auto s = motion_signal(frames);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_NEAR(s[0], 0.01, 1e-6);
  EXPECT_NEAR(s[1], 0.02, 1e-6);
  std::vector<RawFrame> one = {pose_at(0)};
  EXPECT_EQ(code_of([&] { motion_signal(one); }), ErrorCode::TooFewFrames);
}

TEST(SegmenterConfigTest, Validation) {
  SegmenterConfig c;
  EXPECT_DOUBLE_EQ(c.start_threshold, 0.01);
  EXPECT_DOUBLE_EQ(c.stop_threshold, 0.004);
  EXPECT_EQ(c.start_hold, 3);
  EXPECT_EQ(c.stop_hold, 10);
  EXPECT_EQ(c.max_clip_frames, 150);
  c.validate();
  c.stop_threshold = 0.02;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::BadConfig);
  c = SegmenterConfig{};
  c.start_hold = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::BadConfig);
  c = SegmenterConfig{};
  c.stop_hold = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::BadConfig);
}

TEST(Segment, StillStreamEmitsNothing) {
  auto frames = burst(100, 0, 0);
  EXPECT_TRUE(segment_stream(frames, SegmenterConfig{}, kFeatures).empty());
}

TEST(Segment, SingleBurst) {
  // Transitions 4->5 .. 33->34 move. Recording starts once 3 of them are seen and
  // reaches back to frame 4; ten still transitions end it and are dropped.
  auto frames = burst(5, 30, 15);
  auto clips = segment_stream(frames, SegmenterConfig{}, kFeatures);
  ASSERT_EQ(clips.size(), 1u);
  const auto n = static_cast<int>(clips[0].frames.size());
  EXPECT_GE(n, 30 - 3);
  EXPECT_LE(n, 30 + 3);
  EXPECT_EQ(clips[0].first_frame, 4u);
  EXPECT_EQ(clips[0].last_frame, 34u);
  for (std::size_t i = 0; i < clips[0].frames.size(); ++i) {
    EXPECT_TRUE(same_frame(clips[0].frames[i], frames[4 + i])) << i;
  }
}

TEST(Segment, CapAtMaxClipFrames) {
  auto frames = burst(0, 200, 0);
  auto clips = segment_stream(frames, SegmenterConfig{}, kFeatures);
  ASSERT_FALSE(clips.empty());
  EXPECT_EQ(clips[0].frames.size(), 150u);
  EXPECT_EQ(clips[0].first_frame, 0u);
}

TEST(Segment, FinishFlushesClipInProgress) {
  auto frames = burst(5, 20, 3);
  Segmenter seg(SegmenterConfig{}, kFeatures);
  for (const auto& f : frames) EXPECT_FALSE(seg.push(f).has_value());
  EXPECT_TRUE(seg.recording());
  auto clip = seg.finish();
  ASSERT_TRUE(clip.has_value());
  EXPECT_EQ(clip->first_frame, 4u);
  EXPECT_EQ(clip->last_frame, 24u);
  EXPECT_FALSE(seg.finish().has_value());
}

TEST(Segment, WrongWidthFramesAreSkipped) {
  auto frames = burst(5, 30, 15);
  std::vector<StreamFrame> noisy;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    noisy.push_back(frames[i]);
    if (i % 7 == 0) noisy.push_back({RawFrame(12, 0.5f), std::nullopt});
  }
  Segmenter seg(SegmenterConfig{}, kFeatures);
  std::vector<Segment> clips;
  for (const auto& f : noisy) {
    if (auto s = seg.push(f)) clips.push_back(*s);
  }
  EXPECT_EQ(seg.skipped_frames(), (frames.size() + 6) / 7);
  ASSERT_EQ(clips.size(), 1u);
  EXPECT_EQ(clips[0].frames.size(), 31u);
}

TEST(Segment, TimestampsTravelWithFrames) {
  auto frames = burst(5, 30, 15);
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i].timestamp = 0.1 * static_cast<double>(i);
  auto clips = segment_stream(frames, SegmenterConfig{}, kFeatures);
  ASSERT_EQ(clips.size(), 1u);
  EXPECT_DOUBLE_EQ(*clips[0].frames.front().timestamp, 0.4);
}

TEST(Segment, RandomStreamsGiveOrderedDisjointSubsequences) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    SegmenterConfig cfg;
    cfg.start_hold = 1 + static_cast<int>(rng.below(4));
    cfg.stop_hold = 1 + static_cast<int>(rng.below(12));
    cfg.max_clip_frames = 2 + static_cast<int>(rng.below(60));
    std::vector<StreamFrame> frames;
    double x = 0;
    const auto n = 50 + rng.below(300);
    bool moving = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.08) moving = !moving;
      if (moving) x += 0.005 + 0.03 * rng.uniform();
      frames.push_back({pose_at(x), static_cast<double>(i)});
    }
    Segmenter seg(cfg, kFeatures);
    std::vector<Segment> clips;
    const auto bound = static_cast<std::size_t>(std::max(cfg.max_clip_frames, cfg.start_hold + 1));
    for (const auto& f : frames) {
      if (auto s = seg.push(f)) clips.push_back(*s);
      ASSERT_LE(seg.buffered_frames(), bound);
    }
    if (auto s = seg.finish()) clips.push_back(*s);

    std::size_t next_free = 0;
    for (const auto& c : clips) {
      ASSERT_GE(c.first_frame, next_free);
      ASSERT_EQ(c.last_frame + 1 - c.first_frame, c.frames.size());
      ASSERT_LE(c.frames.size(), static_cast<std::size_t>(cfg.max_clip_frames));
      for (std::size_t i = 0; i < c.frames.size(); ++i) ASSERT_TRUE(same_frame(c.frames[i], frames[c.first_frame + i]));
      next_free = c.last_frame + 1;
    }
  }
}

TEST(Segment, RepeatedRunsAgree) {
  auto frames = burst(10, 40, 20);
  auto more = burst(3, 25, 12, 0.015);
  frames.insert(frames.end(), more.begin(), more.end());
  auto a = segment_stream(frames, SegmenterConfig{}, kFeatures);
  auto b = segment_stream(frames, SegmenterConfig{}, kFeatures);
  ASSERT_EQ(a.size(), b.size());
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first_frame, b[i].first_frame);
    EXPECT_EQ(a[i].last_frame, b[i].last_frame);
  }
}
