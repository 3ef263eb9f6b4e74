#include "tslformer/landmarks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "tslformer/error.hpp"

namespace tslformer {

namespace {

constexpr const char* kHandJoints[] = {
    "wrist",             "thumb_cmc",         "thumb_mcp",         "thumb_ip",
    "thumb_tip",         "index_finger_mcp",  "index_finger_pip",  "index_finger_dip",
    "index_finger_tip",  "middle_finger_mcp", "middle_finger_pip", "middle_finger_dip",
    "middle_finger_tip", "ring_finger_mcp",   "ring_finger_pip",   "ring_finger_dip",
    "ring_finger_tip",   "pinky_mcp",         "pinky_pip",         "pinky_dip",
    "pinky_tip",
};

constexpr const char* kPoseJoints[] = {
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
};

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

std::string row_context(std::size_t line_no) { return "line " + std::to_string(line_no); }

float parse_float(std::string_view field, std::size_t line_no) {
  float value = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (field.empty() || ec != std::errc() || ptr != last) {
    throw Error(ErrorCode::BadNumber,
                row_context(line_no) + ": cannot parse coordinate '" + std::string(field) + "'");
  }
  return value;
}

std::uint64_t parse_index(std::string_view field, std::size_t line_no) {
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (field.empty() || ec != std::errc() || ptr != field.data() + field.size()) {
    throw Error(ErrorCode::BadNumber,
                row_context(line_no) + ": cannot parse frame index '" + std::string(field) + "'");
  }
  return value;
}

template <typename LineSource>
std::vector<FrameRecord> parse_lines(LineSource&& next_line, const LandmarkLayout& layout) {
  std::string_view line;
  std::size_t line_no = 0;
  auto fetch = [&]() {
    if (!next_line(line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return true;
  };

  const std::string header = layout.csv_header();
  if (!fetch() || line != header) {
    throw Error(ErrorCode::HeaderMismatch, "first line does not match the expected header for a " +
                                               std::to_string(layout.keypoint_count()) +
                                               "-keypoint layout");
  }

  const std::size_t features = layout.feature_count();
  const std::size_t expected = features + 3;
  std::vector<FrameRecord> records;
  while (fetch()) {
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != expected) {
      throw Error(ErrorCode::MalformedRow, row_context(line_no) + ": expected " +
                                               std::to_string(expected) + " fields, got " +
                                               std::to_string(fields.size()));
    }
    FrameRecord record;
    record.video_id = std::string(fields[0]);
    record.frame_index = parse_index(fields[1], line_no);
    record.features.reserve(features);
    for (std::size_t i = 0; i < features; ++i) {
      std::string_view field = fields[2 + i];
      if (field == "None") {
        record.features.emplace_back(std::nullopt);
      } else {
        record.features.emplace_back(parse_float(field, line_no));
      }
    }
    record.label = std::string(fields.back());
    records.push_back(std::move(record));
  }
  return records;
}

void append_float(std::string& out, float value) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  out.append(buf, ptr);
}

}  // namespace

// --- LandmarkLayout ---------------------------------------------------------

LandmarkLayout LandmarkLayout::standard() {
  std::vector<std::string> names;
  names.reserve(48);
  for (const char* side : {"left_hand_", "right_hand_"}) {
    for (const char* joint : kHandJoints) names.push_back(std::string(side) + joint);
  }
  for (const char* joint : kPoseJoints) names.emplace_back(joint);
  return LandmarkLayout(std::move(names));
}

LandmarkLayout::LandmarkLayout(std::vector<std::string> keypoint_names)
    : names_(std::move(keypoint_names)) {
  if (names_.empty()) throw Error(ErrorCode::BadConfig, "layout needs at least one keypoint");
  std::unordered_set<std::string> seen;
  for (const auto& name : names_) {
    if (name.empty() || name.find_first_of(",\n\r") != std::string::npos) {
      throw Error(ErrorCode::BadConfig, "invalid keypoint name '" + name + "'");
    }
    if (!seen.insert(name).second) {
      throw Error(ErrorCode::BadConfig, "duplicate keypoint name '" + name + "'");
    }
  }
}

std::string LandmarkLayout::csv_header() const {
  std::string header = "video_id,frame_index";
  for (const auto& name : names_) {
    for (const char* axis : {"_x", "_y", "_z"}) {
      header += ',';
      header += name;
      header += axis;
    }
  }
  header += ",label";
  return header;
}

std::optional<std::size_t> LandmarkLayout::feature_offset(std::string_view keypoint) const {
  auto it = std::find(names_.begin(), names_.end(), keypoint);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin()) * kDimsPerKeypoint;
}

// --- ClassVocabulary --------------------------------------------------------

ClassVocabulary::ClassVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& name = names_[i];
    if (name.empty() || name.find_first_of(",\n\r") != std::string::npos) {
      throw Error(ErrorCode::BadConfig, "invalid class name '" + name + "'");
    }
    if (!index_.emplace(name, static_cast<int>(i)).second) {
      throw Error(ErrorCode::BadConfig, "duplicate class name '" + name + "'");
    }
  }
}

ClassVocabulary ClassVocabulary::from_records(std::span<const FrameRecord> records) {
  std::set<std::string> labels;
  for (const auto& r : records) {
    if (!r.label.empty()) labels.insert(r.label);
  }
  return ClassVocabulary(std::vector<std::string>(labels.begin(), labels.end()));
}

bool ClassVocabulary::contains(std::string_view name) const {
  return index_.find(std::string(name)) != index_.end();
}

int ClassVocabulary::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw Error(ErrorCode::UnknownClass, "class '" + std::string(name) + "' is not in the vocabulary");
  }
  return it->second;
}

// --- CSV --------------------------------------------------------------------

std::vector<FrameRecord> parse_landmark_csv(std::string_view text, const LandmarkLayout& layout) {
  std::size_t pos = 0;
  auto next = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    line = text.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  return parse_lines(next, layout);
}

std::vector<FrameRecord> parse_landmark_csv(std::istream& in, const LandmarkLayout& layout) {
  std::string buffer;
  auto next = [&](std::string_view& line) {
    if (!std::getline(in, buffer)) return false;
    line = buffer;
    return true;
  };
  return parse_lines(next, layout);
}

void write_landmark_csv(std::ostream& out, std::span<const FrameRecord> records,
                        const LandmarkLayout& layout) {
  out << layout.csv_header() << '\n';
  std::string row;
  for (const auto& r : records) {
    if (r.features.size() != layout.feature_count()) {
      throw Error(ErrorCode::DimensionMismatch, "record for video '" + r.video_id + "' has " +
                                                    std::to_string(r.features.size()) +
                                                    " features");
    }
    row.clear();
    row += r.video_id;
    row += ',';
    row += std::to_string(r.frame_index);
    for (const auto& value : r.features) {
      row += ',';
      if (value) {
        append_float(row, *value);
      } else {
        row += "None";
      }
    }
    row += ',';
    row += r.label;
    row += '\n';
    out << row;
  }
}

std::string write_landmark_csv(std::span<const FrameRecord> records, const LandmarkLayout& layout) {
  std::ostringstream out;
  write_landmark_csv(out, records, layout);
  return out.str();
}

// --- grouping and imputation ------------------------------------------------

std::vector<VideoClip> group_clips(std::span<const FrameRecord> records) {
  std::vector<VideoClip> clips;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& r : records) {
    auto [it, inserted] = slot.emplace(r.video_id, clips.size());
    if (inserted) {
      clips.push_back(VideoClip{r.video_id, {}, r.label});
    }
    VideoClip& clip = clips[it->second];
    if (clip.label != r.label) {
      throw Error(ErrorCode::InconsistentLabel, "video '" + r.video_id + "' has labels '" +
                                                    clip.label + "' and '" + r.label + "'");
    }
    clip.frames.push_back(r);
  }
  for (auto& clip : clips) {
    std::stable_sort(clip.frames.begin(), clip.frames.end(),
                     [](const FrameRecord& a, const FrameRecord& b) {
                       return a.frame_index < b.frame_index;
                     });
    for (std::size_t i = 1; i < clip.frames.size(); ++i) {
      if (clip.frames[i].frame_index == clip.frames[i - 1].frame_index) {
        throw Error(ErrorCode::MalformedRow, "video '" + clip.video_id + "' repeats frame index " +
                                                 std::to_string(clip.frames[i].frame_index));
      }
    }
  }
  return clips;
}

std::vector<float> impute_missing(std::span<const std::optional<float>> features) {
  std::vector<float> out(features.size(), 0.0f);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i]) out[i] = *features[i];
  }
  return out;
}

std::vector<float> impute_missing(const FrameRecord& frame) { return impute_missing(frame.features); }

std::vector<std::optional<float>> recenter_on_shoulders(std::span<const std::optional<float>> features,
                                                        const LandmarkLayout& layout) {
  std::vector<std::optional<float>> out(features.begin(), features.end());
  auto left = layout.feature_offset("left_shoulder");
  auto right = layout.feature_offset("right_shoulder");
  if (!left || !right || features.size() != layout.feature_count()) return out;
  float center[3];
  for (std::size_t a = 0; a < 3; ++a) {
    const auto& l = features[*left + a];
    const auto& r = features[*right + a];
    if (!l || !r) return out;
    center[a] = 0.5f * (*l + *r);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i]) *out[i] -= center[i % 3];
  }
  return out;
}

// --- sampling ---------------------------------------------------------------

std::vector<std::size_t> sample_frames(std::size_t n_frames, std::size_t t_data) {
  if (n_frames == 0) throw Error(ErrorCode::ZeroFrames, "clip has no frames");
  if (t_data == 0) throw Error(ErrorCode::BadConfig, "frame budget must be positive");
  std::vector<std::size_t> idx;
  if (n_frames < t_data) {
    idx.resize(n_frames);
    for (std::size_t i = 0; i < n_frames; ++i) idx[i] = i;
    return idx;
  }
  if (t_data == 1) return {0};

  // exact rational rounding of k (n-1) / (t-1), half to even
  const std::uint64_t span = n_frames - 1;
  const std::uint64_t den = t_data - 1;
  idx.reserve(t_data);
  for (std::uint64_t k = 0; k < t_data; ++k) {
    std::uint64_t num = k * span;
    std::uint64_t q = num / den;
    std::uint64_t twice_r = 2 * (num % den);
    if (twice_r > den || (twice_r == den && (q & 1U))) ++q;
    idx.push_back(static_cast<std::size_t>(q));
  }
  for (std::size_t k = 1; k < idx.size(); ++k) {
    if (idx[k] <= idx[k - 1]) idx[k] = idx[k - 1] + 1;
  }
  // collisions can only push past the end when spacing is below one frame
  if (idx.back() > span) {
    idx.back() = span;
    for (std::size_t k = idx.size() - 1; k > 0; --k) {
      if (idx[k - 1] >= idx[k]) idx[k - 1] = idx[k] - 1;
    }
  }
  return idx;
}

std::vector<std::size_t> sample_frames_by_rate(std::span<const double> timestamps, double rate,
                                               std::size_t t_data) {
  if (timestamps.empty()) throw Error(ErrorCode::ZeroFrames, "clip has no frames");
  if (!(rate > 0)) throw Error(ErrorCode::BadConfig, "sampling rate must be positive");
  constexpr double kSlack = 1e-9;
  std::vector<std::size_t> picks;
  const double t0 = timestamps.front();
  const double period = 1.0 / rate;
  std::size_t cursor = 0;
  for (std::size_t k = 0;; ++k) {
    double target = t0 + static_cast<double>(k) * period;
    if (target > timestamps.back() + kSlack) break;
    while (cursor < timestamps.size() && timestamps[cursor] < target - kSlack) ++cursor;
    if (cursor == timestamps.size()) break;
    if (picks.empty() || cursor > picks.back()) picks.push_back(cursor);
  }
  if (picks.size() <= t_data) return picks;
  std::vector<std::size_t> thinned;
  for (std::size_t i : sample_frames(picks.size(), t_data)) thinned.push_back(picks[i]);
  return thinned;
}

FrameSampler FrameSampler::parse(std::string_view text) {
  auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw Error(ErrorCode::BadConfig, "sampler must look like fixed:16 or fps:15");
  }
  std::string_view kind = text.substr(0, colon);
  std::string_view number = text.substr(colon + 1);
  double value = 0;
  auto [ptr, ec] = std::from_chars(number.data(), number.data() + number.size(), value);
  if (ec != std::errc() || ptr != number.data() + number.size() || !(value > 0)) {
    throw Error(ErrorCode::BadConfig, "bad sampler value '" + std::string(number) + "'");
  }
  FrameSampler sampler;
  if (kind == "fixed") {
    if (value != std::floor(value)) throw Error(ErrorCode::BadConfig, "fixed sampler needs an integer");
    sampler.mode = Mode::Fixed;
  } else if (kind == "fps") {
    sampler.mode = Mode::Rate;
  } else {
    throw Error(ErrorCode::BadConfig, "unknown sampler '" + std::string(kind) + "'");
  }
  sampler.value = value;
  return sampler;
}

std::string FrameSampler::to_string() const {
  std::ostringstream s;
  s << (mode == Mode::Fixed ? "fixed:" : "fps:") << value;
  return s.str();
}

std::vector<std::size_t> FrameSampler::select(std::size_t n_frames, std::span<const double> timestamps,
                                              std::size_t capacity) const {
  if (n_frames == 0) throw Error(ErrorCode::ZeroFrames, "clip has no frames");
  if (mode == Mode::Fixed) {
    auto budget = static_cast<std::size_t>(value);
    if (budget > capacity) {
      throw Error(ErrorCode::DimensionMismatch, "sampler asks for " + std::to_string(budget) +
                                                    " frames but the model holds " +
                                                    std::to_string(capacity));
    }
    return sample_frames(n_frames, budget);
  }
  if (!timestamps.empty()) {
    if (timestamps.size() != n_frames) {
      throw Error(ErrorCode::DimensionMismatch, "timestamp count differs from frame count");
    }
    return sample_frames_by_rate(timestamps, value, capacity);
  }
  std::vector<double> synthetic(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) synthetic[i] = static_cast<double>(i) / assumed_source_fps;
  return sample_frames_by_rate(synthetic, value, capacity);
}

// --- clip tensors -----------------------------------------------------------

std::size_t ClipTensor::data_frames() const {
  return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), FrameKind::Data));
}

std::vector<std::uint8_t> ClipTensor::attention_mask() const {
  std::vector<std::uint8_t> mask(kinds.size());
  for (std::size_t t = 0; t < kinds.size(); ++t) mask[t] = kinds[t] != FrameKind::Pad;
  return mask;
}

ClipTensor ClipTensor::padded(std::size_t extra) const {
  ClipTensor out = *this;
  out.length += extra;
  out.features.resize(out.length * width, 0.0f);
  out.kinds.resize(out.length, FrameKind::Pad);
  return out;
}

ClipTensor build_clip_tensor(std::span<const std::vector<float>> frames, std::size_t feature_count,
                             std::size_t t_data, std::optional<int> label_index) {
  if (frames.size() > t_data) {
    throw Error(ErrorCode::DimensionMismatch, std::to_string(frames.size()) +
                                                  " frames exceed the budget of " +
                                                  std::to_string(t_data));
  }
  ClipTensor clip;
  clip.length = t_data + 1;
  clip.width = feature_count;
  clip.features.assign(clip.length * feature_count, 0.0f);
  clip.kinds.assign(clip.length, FrameKind::Pad);
  clip.label_index = label_index;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].size() != feature_count) {
      throw Error(ErrorCode::DimensionMismatch, "frame " + std::to_string(t) + " has " +
                                                    std::to_string(frames[t].size()) +
                                                    " features, expected " +
                                                    std::to_string(feature_count));
    }
    std::copy(frames[t].begin(), frames[t].end(), clip.features.begin() + t * feature_count);
    clip.kinds[t] = FrameKind::Data;
  }
  const std::size_t eos = frames.size();
  std::fill_n(clip.features.begin() + eos * feature_count, feature_count, kEosValue);
  clip.kinds[eos] = FrameKind::Eos;
  return clip;
}

ClipTensor make_clip(std::span<const std::vector<std::optional<float>>> frames,
                     std::span<const double> timestamps, std::size_t feature_count,
                     const FrameSampler& sampler, std::size_t t_data,
                     std::optional<int> label_index) {
  auto picks = sampler.select(frames.size(), timestamps, t_data);
  std::vector<std::vector<float>> dense;
  dense.reserve(picks.size());
  for (std::size_t i : picks) dense.push_back(impute_missing(frames[i]));
  return build_clip_tensor(dense, feature_count, t_data, label_index);
}

}  // namespace tslformer
