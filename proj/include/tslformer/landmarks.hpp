#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tslformer {

/// Ordered set of tracked keypoints. Every keypoint contributes X, Y, Z.
class LandmarkLayout {
 public:
  static constexpr std::size_t kDimsPerKeypoint = 3;

  /// 21 left-hand joints, 21 right-hand joints, then shoulders, elbows and
  /// wrists from the pose model: 48 keypoints, 144 features.
  static LandmarkLayout standard();

  /// Throws BadConfig on an empty list or duplicate names.
  explicit LandmarkLayout(std::vector<std::string> keypoint_names);

  std::size_t keypoint_count() const noexcept { return names_.size(); }
  std::size_t feature_count() const noexcept { return names_.size() * kDimsPerKeypoint; }
  const std::vector<std::string>& keypoint_names() const noexcept { return names_; }

  /// `video_id,frame_index,<kp>_x,<kp>_y,<kp>_z,...,label` (no newline).
  std::string csv_header() const;

  /// Index of the first feature (the X coordinate) of a named keypoint.
  std::optional<std::size_t> feature_offset(std::string_view keypoint) const;

 private:
  std::vector<std::string> names_;
};

/// One landmark CSV row. Missing coordinates are empty optionals.
struct FrameRecord {
  std::string video_id;
  std::uint64_t frame_index = 0;
  std::vector<std::optional<float>> features;
  std::string label;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

/// Bijective mapping between class names and contiguous indices.
class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  /// Throws BadConfig on duplicates or on names containing `,` or newlines.
  explicit ClassVocabulary(std::vector<std::string> names);

  /// Distinct non-empty labels in lexicographic order.
  static ClassVocabulary from_records(std::span<const FrameRecord> records);

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(std::size_t index) const { return names_.at(index); }
  bool contains(std::string_view name) const;
  /// Throws UnknownClass.
  int index_of(std::string_view name) const;

  friend bool operator==(const ClassVocabulary& a, const ClassVocabulary& b) {
    return a.names_ == b.names_;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

std::vector<FrameRecord> parse_landmark_csv(std::string_view text, const LandmarkLayout& layout);
std::vector<FrameRecord> parse_landmark_csv(std::istream& in, const LandmarkLayout& layout);

void write_landmark_csv(std::ostream& out, std::span<const FrameRecord> records,
                        const LandmarkLayout& layout);
std::string write_landmark_csv(std::span<const FrameRecord> records, const LandmarkLayout& layout);

struct VideoClip {
  std::string video_id;
  std::vector<FrameRecord> frames;  // ascending frame_index
  std::string label;
};

/// Groups rows by video id in order of first appearance and sorts each
/// group by frame index. Throws InconsistentLabel, or MalformedRow when a
/// frame index repeats inside one video.
std::vector<VideoClip> group_clips(std::span<const FrameRecord> records);

std::vector<float> impute_missing(const FrameRecord& frame);
std::vector<float> impute_missing(std::span<const std::optional<float>> features);

/// Shifts every present keypoint so the shoulder midpoint is the origin.
/// Frames without both shoulders are returned unchanged.
std::vector<std::optional<float>> recenter_on_shoulders(std::span<const std::optional<float>> features,
                                                        const LandmarkLayout& layout);

/// Evenly spaced indices idx_k = round(k (n-1) / (t-1)), ties to even.
/// All of 0..n-1 when n < t. Throws ZeroFrames when n = 0.
std::vector<std::size_t> sample_frames(std::size_t n_frames, std::size_t t_data);

/// Picks the first frame at or after t0 + k / rate for k = 0, 1, ...,
/// then thins the picks evenly to at most `t_data`.
std::vector<std::size_t> sample_frames_by_rate(std::span<const double> timestamps, double rate,
                                               std::size_t t_data);

/// `fixed:N` (N evenly spaced frames) or `fps:R` (R frames per second of
/// footage). Rate sampling uses timestamps when given, otherwise frame
/// positions at `assumed_source_fps`.
struct FrameSampler {
  enum class Mode { Fixed, Rate };
  Mode mode = Mode::Fixed;
  double value = 16;
  double assumed_source_fps = 30;

  /// Throws BadConfig.
  static FrameSampler parse(std::string_view text);
  std::string to_string() const;

  /// `capacity` is the model's data-frame budget (sequence length minus EOS).
  std::vector<std::size_t> select(std::size_t n_frames, std::span<const double> timestamps,
                                  std::size_t capacity) const;
};

enum class FrameKind : std::uint8_t { Data = 0, Eos = 1, Pad = 2 };

/// Value written to every feature of the end-of-sequence row. Mediapipe
/// X/Y coordinates are normalized to [0, 1], so 2.0 never occurs in data.
inline constexpr float kEosValue = 2.0f;

/// Fixed-length masked clip: DATA* EOS PAD* rows of `width` features.
struct ClipTensor {
  std::size_t length = 0;  // T, rows including EOS and PAD
  std::size_t width = 0;   // F
  std::vector<float> features;  // length * width, row-major
  std::vector<FrameKind> kinds;
  std::optional<int> label_index;

  std::span<const float> row(std::size_t t) const {
    return std::span<const float>(features).subspan(t * width, width);
  }
  std::size_t data_frames() const;
  /// true for DATA and EOS rows.
  std::vector<std::uint8_t> attention_mask() const;
  /// Appends `extra` PAD rows.
  ClipTensor padded(std::size_t extra) const;
};

/// Output length is t_data + 1. Throws DimensionMismatch on a wrong frame
/// width or more than t_data frames.
ClipTensor build_clip_tensor(std::span<const std::vector<float>> frames, std::size_t feature_count,
                             std::size_t t_data, std::optional<int> label_index = std::nullopt);

/// impute -> sample -> build, for raw frames of one clip.
ClipTensor make_clip(std::span<const std::vector<std::optional<float>>> frames,
                     std::span<const double> timestamps, std::size_t feature_count,
                     const FrameSampler& sampler, std::size_t t_data,
                     std::optional<int> label_index = std::nullopt);

}  // namespace tslformer
