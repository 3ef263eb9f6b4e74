#include "tslformer/inference.hpp"

#include <chrono>
#include <condition_variable>
#include <istream>
#include <mutex>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "tslformer/error.hpp"

namespace tslformer {

std::vector<RankedClass> infer_clip(std::span<const RawFrame> frames, std::span<const double> timestamps,
                                    const Checkpoint& checkpoint, const FrameSampler& sampler, std::size_t k) {
  if (frames.empty()) throw Error(ErrorCode::EmptyClip, "cannot classify a clip without frames");
  const auto width = static_cast<std::size_t>(checkpoint.config.input_dim);
  for (const auto& f : frames) {
    if (f.size() != width) {
      throw Error(ErrorCode::DimensionMismatch, "frame has " + std::to_string(f.size()) + " features, model expects " +
                                                    std::to_string(width));
    }
  }
  ClipTensor clip = make_clip(frames, timestamps, width, sampler, checkpoint.config.data_frames());
  auto logits = clip_logits(clip, checkpoint.params, checkpoint.config);
  std::vector<RankedClass> out;
  for (const auto& s : predict_topk(std::span<const float>(logits), k)) {
    out.push_back({checkpoint.vocabulary.name(static_cast<std::size_t>(s.index)), s.index, s.probability});
  }
  return out;
}

std::vector<RankedClass> infer_clip(std::span<const RawFrame> frames, const Checkpoint& checkpoint, std::size_t k) {
  return infer_clip(frames, {}, checkpoint, checkpoint.sampler, k);
}

std::optional<StreamFrame> parse_stream_record(std::string_view line, std::size_t feature_count) {
  auto json = nlohmann::json::parse(line, nullptr, false);
  if (json.is_discarded() || !json.is_object()) return std::nullopt;
  auto features = json.find("features");
  if (features == json.end() || !features->is_array() || features->size() != feature_count) return std::nullopt;
  StreamFrame frame;
  frame.features.reserve(feature_count);
  for (const auto& v : *features) {
    if (v.is_null()) {
      frame.features.emplace_back(std::nullopt);
    } else if (v.is_number()) {
      frame.features.emplace_back(v.get<float>());
    } else {
      return std::nullopt;
    }
  }
  auto ts = json.find("ts");
  if (ts != json.end() && !ts->is_null()) {
    if (!ts->is_number()) return std::nullopt;
    frame.timestamp = ts->get<double>();
  }
  return frame;
}

namespace {

// Single-slot hand-off between the reader and the classifier thread.
class ClipSlot {
 public:
  void put(Segment segment) {
    std::unique_lock lock(mutex_);
    ready_.wait(lock, [&] { return !pending_; });
    pending_ = std::move(segment);
    ready_.notify_all();
  }

  std::optional<Segment> take() {
    std::unique_lock lock(mutex_);
    ready_.wait(lock, [&] { return pending_ || closed_; });
    if (!pending_) return std::nullopt;
    std::optional<Segment> out = std::move(pending_);
    pending_.reset();
    ready_.notify_all();
    return out;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    ready_.notify_all();
  }

 private:
  std::mutex mutex_;
  std::condition_variable ready_;
  std::optional<Segment> pending_;
  bool closed_ = false;
};

}  // namespace

StreamSummary run_stream(std::istream& in, std::ostream& out, const Checkpoint& checkpoint,
                         const StreamOptions& options) {
  const auto width = static_cast<std::size_t>(checkpoint.config.input_dim);
  const FrameSampler sampler = options.sampler.value_or(checkpoint.sampler);
  if (options.top_k < 1 || options.top_k > checkpoint.vocabulary.size()) {
    throw Error(ErrorCode::BadK, "top-k must be in [1, " + std::to_string(checkpoint.vocabulary.size()) + "]");
  }
  Segmenter segmenter(options.segmenter, width);
  StreamSummary summary;
  ClipSlot slot;
  std::exception_ptr failure;

  std::thread classifier([&] {
    std::size_t clip_number = 0;
    while (auto segment = slot.take()) {
      try {
        auto started = std::chrono::steady_clock::now();
        std::vector<RawFrame> frames;
        std::vector<double> timestamps;
        bool timed = true;
        for (auto& f : segment->frames) {
          timed = timed && f.timestamp.has_value();
          if (timed) timestamps.push_back(*f.timestamp);
          frames.push_back(std::move(f.features));
        }
        if (!timed) timestamps.clear();
        auto ranked = infer_clip(frames, timestamps, checkpoint, sampler, options.top_k);
        double latency =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();

        nlohmann::ordered_json record;
        record["clip"] = clip_number++;
        record["start_frame"] = segment->first_frame;
        record["end_frame"] = segment->last_frame;
        record["frames"] = frames.size();
        if (timed) {
          record["start_ts"] = timestamps.front();
          record["end_ts"] = timestamps.back();
        }
        auto& top = record["top_k"] = nlohmann::ordered_json::array();
        for (const auto& r : ranked) top.push_back({{"class", r.name}, {"probability", r.probability}});
        record["latency_ms"] = latency;
        out << record.dump() << '\n' << std::flush;
      } catch (...) {
        if (!failure) failure = std::current_exception();
      }
    }
  });

  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty() || line == "\r") continue;
      ++summary.frames;
      auto frame = parse_stream_record(line, width);
      if (!frame) {
        ++summary.skipped;
        continue;
      }
      if (auto segment = segmenter.push(std::move(*frame))) {
        ++summary.clips;
        slot.put(std::move(*segment));
      }
    }
    if (auto segment = segmenter.finish()) {
      ++summary.clips;
      slot.put(std::move(*segment));
    }
  } catch (...) {
    slot.close();
    classifier.join();
    throw;
  }
  slot.close();
  classifier.join();
  if (failure) std::rethrow_exception(failure);
  return summary;
}

}  // namespace tslformer
