#include "tslformer/cli.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tslformer/checkpoint.hpp"
#include "tslformer/config.hpp"
#include "tslformer/error.hpp"
#include "tslformer/inference.hpp"
#include "tslformer/training.hpp"

namespace tslformer {

namespace {

constexpr std::array kSubcommands = {"preprocess", "train", "crossval", "eval", "infer", "stream"};

struct Options {
  std::vector<std::string> data;
  std::string config;
  std::string checkpoint;
  std::string out;
  std::string log;
  std::string confusion;
  std::optional<std::string> sampler;
  std::optional<std::uint64_t> seed;
  std::optional<int> folds;
  std::optional<double> test_fraction;
  std::optional<int> epochs;
  std::size_t top_k = 5;
  SegmenterConfig segmenter;
};

void require(bool present, const char* flag, const std::string& subcommand) {
  if (!present) throw Error(ErrorCode::MissingFlag, subcommand + " needs " + flag);
}

RunConfig load_run_config(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) apply_config_file(o.config, rc);
  if (o.sampler) rc.sampler = FrameSampler::parse(*o.sampler);
  if (o.seed) rc.train.seed = *o.seed;
  if (o.folds) rc.train.k_folds = *o.folds;
  if (o.test_fraction) rc.train.test_fraction = *o.test_fraction;
  if (o.epochs) rc.train.max_epochs = *o.epochs;
  rc.train.validate();
  return rc;
}

std::vector<FrameRecord> read_records(const std::vector<std::string>& paths, const LandmarkLayout& layout) {
  std::vector<FrameRecord> records;
  for (const auto& path : paths) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
    auto part = parse_landmark_csv(in, layout);
    records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return records;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  return out;
}

nlohmann::ordered_json metrics_json(const MetricsReport& m) {
  return {{"samples", m.samples},           {"accuracy", m.accuracy}, {"recall_micro", m.recall_micro},
          {"recall_macro", m.recall_macro}, {"f1_macro", m.f1_macro}, {"f1_weighted", m.f1_weighted}};
}

void print_metrics(std::ostream& out, const MetricsReport& m) {
  out << std::fixed << std::setprecision(6) << "samples " << m.samples << '\n'
      << "accuracy " << m.accuracy << '\n'
      << "recall_micro " << m.recall_micro << '\n'
      << "recall_macro " << m.recall_macro << '\n'
      << "f1_macro " << m.f1_macro << '\n'
      << "f1_weighted " << m.f1_weighted << '\n'
      << std::defaultfloat;
}

struct LoadedData {
  RunConfig run;
  ClassVocabulary vocabulary;
  Dataset data;
};

LoadedData load_training_data(const Options& o) {
  LoadedData d{load_run_config(o), {}, {}};
  LandmarkLayout layout(d.run.keypoints);
  auto records = read_records(o.data, layout);
  d.vocabulary = ClassVocabulary::from_records(records);
  d.run.model.input_dim = static_cast<int>(layout.feature_count());
  d.run.model.num_classes = static_cast<int>(d.vocabulary.size());
  d.run.model.validate();
  d.data = build_dataset(records, d.vocabulary, d.run.sampler, d.run.model.data_frames(), layout.feature_count(),
                         d.run.sampler.assumed_source_fps);
  if (d.data.empty()) throw Error(ErrorCode::EmptyDataset, "no clips in the input");
  return d;
}

int cmd_preprocess(const Options& o, std::ostream& out, std::ostream& err) {
  require(!o.data.empty(), "--data", "preprocess");
  RunConfig rc;
  if (!o.config.empty()) apply_config_file(o.config, rc);
  LandmarkLayout layout(rc.keypoints);
  auto records = read_records(o.data, layout);
  auto clips = group_clips(records);
  std::vector<FrameRecord> merged;
  merged.reserve(records.size());
  for (auto& clip : clips) {
    for (auto& f : clip.frames) merged.push_back(std::move(f));
  }
  if (o.out.empty()) {
    write_landmark_csv(out, merged, layout);
  } else {
    auto file = open_output(o.out);
    write_landmark_csv(file, merged, layout);
  }
  err << merged.size() << " rows, " << clips.size() << " clips, "
      << ClassVocabulary::from_records(merged).size() << " classes\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  require(!o.data.empty(), "--data", "train");
  require(!o.checkpoint.empty(), "--checkpoint", "train");
  auto d = load_training_data(o);
  auto split = stratified_split(labels_of(d.data), d.run.train.test_fraction, d.run.train.seed);
  Dataset train = subset(d.data, split.train);
  Dataset validation = subset(d.data, split.test);

  std::ofstream log_file;
  if (!o.log.empty()) log_file = open_output(o.log);
  std::ostream& log = o.log.empty() ? out : log_file;
  auto result = train_loop(train, validation, d.run.model, d.run.train,
                           [&](const EpochLog& e) { log << to_json_line(e) << '\n' << std::flush; });

  Checkpoint ck;
  ck.config = d.run.model;
  ck.vocabulary = d.vocabulary;
  ck.keypoints = d.run.keypoints;
  ck.sampler = d.run.sampler;
  ck.seed = d.run.train.seed;
  ck.params = std::move(result.params);
  auto report = evaluate(ck.params, ck.config, validation);
  ck.metrics = {{"val_accuracy", report.accuracy},
                {"val_recall_macro", report.recall_macro},
                {"val_f1_macro", report.f1_macro},
                {"best_epoch", static_cast<double>(result.best_epoch)}};
  save_checkpoint(o.checkpoint, ck);
  err << "trained on " << train.size() << " clips, validated on " << validation.size() << "; best epoch "
      << result.best_epoch << ", validation accuracy " << report.accuracy << '\n';
  return kExitOk;
}

int cmd_crossval(const Options& o, std::ostream& out, std::ostream& err) {
  require(!o.data.empty(), "--data", "crossval");
  auto d = load_training_data(o);
  auto split = stratified_split(labels_of(d.data), d.run.train.test_fraction, d.run.train.seed);
  Dataset pool = subset(d.data, split.train);
  Dataset test = subset(d.data, split.test);

  std::ofstream log_file;
  if (!o.log.empty()) log_file = open_output(o.log);
  auto cv = cross_validate(pool, d.run.model, d.run.train, [&](int fold, const EpochLog& e) {
    if (log_file.is_open()) log_file << "{\"fold\":" << fold << ',' << to_json_line(e).substr(1) << '\n';
  });

  double test_accuracy = 0;
  for (std::size_t f = 0; f < cv.folds.size(); ++f) {
    auto on_test = evaluate(cv.models[f], d.run.model, test);
    test_accuracy += on_test.accuracy;
    nlohmann::ordered_json line = {{"fold", f}};
    line["validation"] = metrics_json(cv.folds[f]);
    line["test"] = metrics_json(on_test);
    out << line.dump() << '\n';
  }
  test_accuracy /= static_cast<double>(cv.folds.size());
  out << std::fixed << std::setprecision(6) << "mean accuracy " << cv.mean_accuracy << '\n'
      << "mean recall_micro " << cv.mean_recall_micro << '\n'
      << "mean recall_macro " << cv.mean_recall_macro << '\n'
      << "mean f1_macro " << cv.mean_f1_macro << '\n'
      << "mean f1_weighted " << cv.mean_f1_weighted << '\n'
      << "mean test_accuracy " << test_accuracy << '\n'
      << std::defaultfloat;
  err << cv.folds.size() << " folds over " << pool.size() << " clips, " << test.size() << " held out\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  require(!o.data.empty(), "--data", "eval");
  require(!o.checkpoint.empty(), "--checkpoint", "eval");
  auto ck = load_checkpoint(o.checkpoint);
  auto layout = ck.layout();
  FrameSampler sampler = o.sampler ? FrameSampler::parse(*o.sampler) : ck.sampler;
  auto records = read_records(o.data, layout);
  auto data = build_dataset(records, ck.vocabulary, sampler, ck.config.data_frames(), layout.feature_count(),
                            sampler.assumed_source_fps);
  auto report = evaluate(ck.params, ck.config, data);
  print_metrics(out, report);
  if (!o.confusion.empty()) {
    auto file = open_output(o.confusion);
    write_confusion_csv(file, report, ck.vocabulary);
  }
  return kExitOk;
}

int cmd_infer(const Options& o, std::ostream& out, std::ostream&) {
  require(!o.data.empty(), "--data", "infer");
  require(!o.checkpoint.empty(), "--checkpoint", "infer");
  auto ck = load_checkpoint(o.checkpoint);
  auto layout = ck.layout();
  FrameSampler sampler = o.sampler ? FrameSampler::parse(*o.sampler) : ck.sampler;
  if (o.top_k < 1 || o.top_k > ck.vocabulary.size()) {
    throw Error(ErrorCode::BadK, "--top-k must be in [1, " + std::to_string(ck.vocabulary.size()) + "]");
  }
  auto records = read_records(o.data, layout);
  for (auto& clip : group_clips(records)) {
    std::vector<RawFrame> frames;
    std::vector<double> timestamps;
    for (auto& f : clip.frames) {
      timestamps.push_back(static_cast<double>(f.frame_index) / sampler.assumed_source_fps);
      frames.push_back(std::move(f.features));
    }
    auto ranked = infer_clip(frames, timestamps, ck, sampler, o.top_k);
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      nlohmann::ordered_json line = {{"video_id", clip.video_id},
                                     {"rank", r + 1},
                                     {"class", ranked[r].name},
                                     {"probability", ranked[r].probability}};
      out << line.dump() << '\n';
    }
  }
  return kExitOk;
}

int cmd_stream(const Options& o, std::istream& in, std::ostream& out, std::ostream& err) {
  require(!o.checkpoint.empty(), "--checkpoint", "stream");
  auto ck = load_checkpoint(o.checkpoint);
  StreamOptions options;
  options.segmenter = o.segmenter;
  if (o.sampler) options.sampler = FrameSampler::parse(*o.sampler);
  options.top_k = o.top_k;
  auto summary = run_stream(in, out, ck, options);
  err << summary.frames << " frames, " << summary.skipped << " skipped, " << summary.clips << " clips\n";
  return kExitOk;
}

void add_data(CLI::App* sub, Options& o, const char* help) { sub->add_option("--data", o.data, help); }

void add_training_flags(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "key = value config file");
  sub->add_option("--sampler", o.sampler, "fixed:N or fps:R");
  sub->add_option("--seed", o.seed, "seed for splits, shuffling and initialization");
  sub->add_option("--test-fraction", o.test_fraction, "held-out fraction per class");
  sub->add_option("--epochs", o.epochs, "maximum epochs");
  sub->add_option("--log", o.log, "epoch log (NDJSON)");
}

}  // namespace

int run_cli(std::span<const std::string> args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Skeletal-landmark sign recognition", args.empty() ? "tslformer" : args[0]};
  app.require_subcommand(1);
  Options o;

  auto* preprocess = app.add_subcommand("preprocess", "validate and merge landmark CSV files");
  add_data(preprocess, o, "landmark CSV (repeatable)");
  preprocess->add_option("--config", o.config, "config file (for the keypoint layout)");
  preprocess->add_option("--out", o.out, "merged CSV (default: standard output)");

  auto* train = app.add_subcommand("train", "train on a stratified split and write a checkpoint");
  add_data(train, o, "landmark CSV (repeatable)");
  add_training_flags(train, o);
  train->add_option("--checkpoint", o.checkpoint, "output checkpoint");

  auto* crossval = app.add_subcommand("crossval", "stratified split, then K-fold cross-validation");
  add_data(crossval, o, "landmark CSV (repeatable)");
  add_training_flags(crossval, o);
  crossval->add_option("--folds", o.folds, "K");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on labelled clips");
  add_data(eval, o, "landmark CSV (repeatable)");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint");
  eval->add_option("--sampler", o.sampler, "override the checkpoint's sampler");
  eval->add_option("--confusion", o.confusion, "confusion matrix CSV output");

  auto* infer = app.add_subcommand("infer", "top-k classes for each clip in a CSV");
  add_data(infer, o, "landmark CSV");
  infer->add_option("--checkpoint", o.checkpoint, "checkpoint");
  infer->add_option("--sampler", o.sampler, "override the checkpoint's sampler");
  infer->add_option("--top-k", o.top_k, "classes per clip");

  auto* stream = app.add_subcommand("stream", "segment NDJSON frames from stdin and classify each clip");
  stream->add_option("--checkpoint", o.checkpoint, "checkpoint");
  stream->add_option("--sampler", o.sampler, "override the checkpoint's sampler");
  stream->add_option("--top-k", o.top_k, "classes per clip");
  stream->add_option("--start-threshold", o.segmenter.start_threshold, "motion that starts a clip");
  stream->add_option("--stop-threshold", o.segmenter.stop_threshold, "motion below which a clip ends");
  stream->add_option("--start-hold", o.segmenter.start_hold, "moving transitions needed to start");
  stream->add_option("--stop-hold", o.segmenter.stop_hold, "still transitions needed to stop");
  stream->add_option("--max-clip-frames", o.segmenter.max_clip_frames, "clip length cap");

  if (args.size() > 1 && !args[1].starts_with('-') &&
      std::find(kSubcommands.begin(), kSubcommands.end(), args[1]) == kSubcommands.end()) {
    err << to_string(ErrorCode::UnknownSubcommand) << ": '" << args[1] << "'\n" << app.help();
    return kExitUsage;
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (preprocess->parsed()) return cmd_preprocess(o, out, err);
    if (train->parsed()) return cmd_train(o, out, err);
    if (crossval->parsed()) return cmd_crossval(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (infer->parsed()) return cmd_infer(o, out, err);
    if (stream->parsed()) return cmd_stream(o, in, out, err);
  } catch (const Error& e) {
    err << e.what() << '\n';
    switch (e.code()) {
      case ErrorCode::BadConfig:
      case ErrorCode::MissingFlag:
      case ErrorCode::UnknownSubcommand:
      case ErrorCode::BadK:
        return kExitUsage;
      default:
        return kExitData;
    }
  } catch (const std::exception& e) {
    err << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace tslformer
