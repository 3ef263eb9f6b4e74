#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tslformer/checkpoint.hpp"
#include "tslformer/cli.hpp"
#include "tslformer/error.hpp"
#include "tslformer/inference.hpp"
#include "tslformer/segmentation.hpp"
#include "tslformer/training.hpp"

namespace py = pybind11;
using namespace tslformer;

namespace {

LandmarkLayout layout_or_standard(const std::optional<std::vector<std::string>>& keypoints) {
  return keypoints ? LandmarkLayout(*keypoints) : LandmarkLayout::standard();
}

py::dict metrics_dict(const MetricsReport& m) {
  py::dict d;
  d["samples"] = m.samples;
  d["accuracy"] = m.accuracy;
  d["recall_micro"] = m.recall_micro;
  d["recall_macro"] = m.recall_macro;
  d["f1_macro"] = m.f1_macro;
  d["f1_weighted"] = m.f1_weighted;
  d["support"] = m.support;
  d["confusion"] = m.confusion;
  return d;
}

std::vector<std::pair<std::string, double>> ranked_pairs(const std::vector<RankedClass>& ranked) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& r : ranked) out.emplace_back(r.name, r.probability);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Skeletal-landmark sign recognition core";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("input_dim", &ModelConfig::input_dim)
      .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("dropout_p", &ModelConfig::dropout_p)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def("validate", &ModelConfig::validate);

  py::class_<FrameRecord>(m, "FrameRecord")
      .def(py::init<>())
      .def_readwrite("video_id", &FrameRecord::video_id)
      .def_readwrite("frame_index", &FrameRecord::frame_index)
      .def_readwrite("features", &FrameRecord::features)
      .def_readwrite("label", &FrameRecord::label)
      .def("__eq__", [](const FrameRecord& a, const FrameRecord& b) { return a == b; });

  m.def("standard_keypoints", [] { return LandmarkLayout::standard().keypoint_names(); });
  m.def("csv_header", [](std::optional<std::vector<std::string>> keypoints) {
    return layout_or_standard(keypoints).csv_header();
  }, py::arg("keypoints") = py::none());
  m.def("parse_landmark_csv", [](const std::string& text, std::optional<std::vector<std::string>> keypoints) {
    return parse_landmark_csv(text, layout_or_standard(keypoints));
  }, py::arg("text"), py::arg("keypoints") = py::none());
  m.def("write_landmark_csv", [](const std::vector<FrameRecord>& records,
                                 std::optional<std::vector<std::string>> keypoints) {
    return write_landmark_csv(records, layout_or_standard(keypoints));
  }, py::arg("records"), py::arg("keypoints") = py::none());
  m.def("impute_missing",
        [](const std::vector<std::optional<float>>& features) { return impute_missing(features); });
  m.def("sample_frames", &sample_frames, py::arg("n_frames"), py::arg("t_data"));

  m.def("stratified_split", [](const std::vector<int>& labels, double test_fraction, std::uint64_t seed) {
    auto s = stratified_split(labels, test_fraction, seed);
    return std::make_pair(s.train, s.test);
  }, py::arg("labels"), py::arg("test_fraction") = 0.2, py::arg("seed") = 0);
  m.def("stratified_kfold", [](const std::vector<int>& labels, int k, std::uint64_t seed) {
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> out;
    for (auto& f : stratified_kfold(labels, k, seed)) out.emplace_back(f.train, f.validation);
    return out;
  }, py::arg("labels"), py::arg("k") = 4, py::arg("seed") = 0);
  m.def("metrics", [](const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t num_classes) {
    return metrics_dict(metrics_from_predictions(truth, predicted, num_classes));
  }, py::arg("truth"), py::arg("predicted"), py::arg("num_classes"));
  m.def("predict_topk", [](const std::vector<double>& logits, std::size_t k) {
    std::vector<std::pair<int, double>> out;
    for (const auto& s : predict_topk(std::span<const double>(logits), k)) out.emplace_back(s.index, s.probability);
    return out;
  }, py::arg("logits"), py::arg("k") = 5);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("random", [](const ModelConfig& config, std::vector<std::string> classes, std::uint64_t seed,
                               std::optional<std::vector<std::string>> keypoints) {
        Checkpoint ck;
        ck.keypoints = layout_or_standard(keypoints).keypoint_names();
        ck.config = config;
        ck.config.input_dim = static_cast<int>(ck.keypoints.size() * 3);
        ck.config.num_classes = static_cast<int>(classes.size());
        ck.vocabulary = ClassVocabulary(std::move(classes));
        ck.seed = seed;
        ck.params = init_params<float>(ck.config, seed);
        return ck;
      }, py::arg("config"), py::arg("classes"), py::arg("seed") = 0, py::arg("keypoints") = py::none())
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); })
      .def("save", [](const Checkpoint& ck, const std::string& path) { save_checkpoint(path, ck); })
      .def_readonly("config", &Checkpoint::config)
      .def_readonly("keypoints", &Checkpoint::keypoints)
      .def_readonly("seed", &Checkpoint::seed)
      .def_readonly("metrics", &Checkpoint::metrics)
      .def_property_readonly("classes", [](const Checkpoint& ck) { return ck.vocabulary.names(); })
      .def_property_readonly("sampler", [](const Checkpoint& ck) { return ck.sampler.to_string(); })
      .def_property_readonly("parameter_count", [](const Checkpoint& ck) { return ck.params.parameter_count(); });

  m.def("infer", [](const std::vector<RawFrame>& frames, const Checkpoint& ck, std::size_t k) {
    py::gil_scoped_release release;
    return ranked_pairs(infer_clip(frames, ck, k));
  }, py::arg("frames"), py::arg("checkpoint"), py::arg("k") = 5);

  m.def("frame_displacement", [](const RawFrame& a, const RawFrame& b) { return frame_displacement(a, b); });
  m.def("segment_stream", [](const std::vector<RawFrame>& frames, double start_threshold, double stop_threshold,
                             int start_hold, int stop_hold, int max_clip_frames) {
    SegmenterConfig cfg{start_threshold, stop_threshold, start_hold, stop_hold, max_clip_frames};
    std::vector<StreamFrame> stream;
    stream.reserve(frames.size());
    for (const auto& f : frames) stream.push_back({f, std::nullopt});
    const auto width = frames.empty() ? LandmarkLayout::standard().feature_count() : frames.front().size();
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& s : segment_stream(stream, cfg, width)) out.emplace_back(s.first_frame, s.last_frame);
    return out;
  }, py::arg("frames"), py::arg("start_threshold") = 0.01, py::arg("stop_threshold") = 0.004,
     py::arg("start_hold") = 3, py::arg("stop_hold") = 10, py::arg("max_clip_frames") = 150);

  m.def("run_cli", [](std::vector<std::string> args, const std::string& stdin_text) {
    args.insert(args.begin(), "tslformer");
    std::istringstream in(stdin_text);
    std::ostringstream out, err;
    int code = 0;
    {
      py::gil_scoped_release release;
      code = run_cli(args, in, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), py::arg("stdin") = "");
}
