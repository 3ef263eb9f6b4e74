#include "tslformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "tslformer/error.hpp"

namespace tslformer {

using ad::Tensor;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::BadConfig, what); };
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (!(test_fraction > 0 && test_fraction < 1)) fail("test_fraction must be in (0, 1)");
  if (k_folds < 2) fail("k_folds must be at least 2");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (max_epochs < 0) fail("max_epochs must be non-negative");
  if (early_stop_patience < 1) fail("early_stop_patience must be at least 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    fail("Adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(scheduler.factor > 0 && scheduler.factor <= 1)) fail("scheduler factor must be in (0, 1]");
  if (scheduler.patience < 1) fail("scheduler patience must be at least 1");
  if (!(scheduler.min_lr >= 0)) fail("min_lr must be non-negative");
}

AdamOptions AdamOptions::from(const TrainConfig& config) {
  return {config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps};
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const std::vector<T>> grads, AdamState<T>& state,
               const AdamOptions& options) {
  if (params.size() != grads.size()) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(params.size()) + " parameters but " +
                                              std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T(0));
      state.second_moment.emplace_back(p.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer state tracks a different parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.first_moment[i].size() != params[i].size()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient " + std::to_string(i) + " has " +
                                                std::to_string(grads[i].size()) + " entries for a " +
                                                std::to_string(params[i].size()) + "-entry parameter");
    }
  }

  ++state.step;
  const double b1 = options.beta1, b2 = options.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_values();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / correction1;
      const double v_hat = vj / correction2;
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) -
                                options.learning_rate * m_hat / (std::sqrt(v_hat) + options.eps));
    }
  }
}

template void adam_step<float>(std::span<Tensor<float>>, std::span<const std::vector<float>>,
                               AdamState<float>&, const AdamOptions&);
template void adam_step<double>(std::span<Tensor<double>>, std::span<const std::vector<double>>,
                                AdamState<double>&, const AdamOptions&);

PlateauScheduler::PlateauScheduler(double initial_lr, SchedulerConfig config)
    : lr_(initial_lr), config_(config) {}

double PlateauScheduler::update(double validation_loss) {
  if (validation_loss < best_ - config_.threshold) {
    best_ = validation_loss;
    stale_ = 0;
    return lr_;
  }
  if (++stale_ >= config_.patience) {
    lr_ = std::max(lr_ * config_.factor, config_.min_lr);
    stale_ = 0;
  }
  return lr_;
}

// --- splitting -------------------------------------------------------------------------

namespace {

std::map<int, std::vector<std::size_t>> by_class(std::span<const int> labels) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  return groups;
}

}  // namespace

Split stratified_split(std::span<const int> labels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) {
    throw Error(ErrorCode::BadConfig, "test_fraction must be in (0, 1)");
  }
  Split split;
  Rng base(seed);
  for (auto& [label, members] : by_class(labels)) {
    if (members.size() < 2) {
      throw Error(ErrorCode::ClassTooSmall, "class " + std::to_string(label) + " has " +
                                                std::to_string(members.size()) +
                                                " sample(s); a split needs at least 2");
    }
    Rng rng = base.fork(static_cast<std::uint64_t>(static_cast<std::int64_t>(label)));
    shuffle(std::span<std::size_t>(members), rng);
    auto n = static_cast<double>(members.size());
    auto n_test = static_cast<std::size_t>(std::llround(n * test_fraction));
    n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    split.test.insert(split.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::vector<Fold> stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::BadConfig, "K must be at least 2");
  const auto K = static_cast<std::size_t>(k);
  std::vector<std::vector<std::size_t>> validation(K);
  Rng base(seed);
  std::size_t cursor = 0;
  for (auto& [label, members] : by_class(labels)) {
    if (members.size() < K) {
      throw Error(ErrorCode::ClassTooSmall, "class " + std::to_string(label) + " has " +
                                                std::to_string(members.size()) + " sample(s), fewer than K = " +
                                                std::to_string(k));
    }
    Rng rng = base.fork(static_cast<std::uint64_t>(static_cast<std::int64_t>(label)));
    shuffle(std::span<std::size_t>(members), rng);
    for (std::size_t i : members) validation[cursor++ % K].push_back(i);
  }
  std::vector<Fold> folds(K);
  for (std::size_t f = 0; f < K; ++f) {
    std::sort(validation[f].begin(), validation[f].end());
    folds[f].validation = validation[f];
    for (std::size_t g = 0; g < K; ++g) {
      if (g != f) folds[f].train.insert(folds[f].train.end(), validation[g].begin(), validation[g].end());
    }
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

// --- data --------------------------------------------------------------------------------

std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> labels;
  labels.reserve(data.size());
  for (const auto& item : data) {
    if (!item.clip.label_index) {
      throw Error(ErrorCode::LabelOutOfRange, "clip '" + item.video_id + "' has no label");
    }
    labels.push_back(*item.clip.label_index);
  }
  return labels;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.at(i));
  return out;
}

Dataset build_dataset(std::span<const FrameRecord> records, const ClassVocabulary& vocabulary,
                      const FrameSampler& sampler, std::size_t t_data, std::size_t feature_count,
                      double assumed_fps) {
  Dataset data;
  for (auto& group : group_clips(records)) {
    int label = vocabulary.index_of(group.label);
    std::vector<std::vector<std::optional<float>>> frames;
    std::vector<double> timestamps;
    for (auto& f : group.frames) {
      if (f.features.size() != feature_count) {
        throw Error(ErrorCode::DimensionMismatch, "video '" + group.video_id + "' has a frame with " +
                                                      std::to_string(f.features.size()) + " features");
      }
      frames.push_back(std::move(f.features));
      timestamps.push_back(static_cast<double>(f.frame_index) / assumed_fps);
    }
    data.push_back({group.video_id, make_clip(frames, timestamps, feature_count, sampler, t_data, label)});
  }
  return data;
}

// --- metrics ----------------------------------------------------------------------------

MetricsReport metrics_from_predictions(std::span<const int> truth, std::span<const int> predicted,
                                       std::size_t num_classes) {
  if (truth.empty()) throw Error(ErrorCode::EmptyDataset, "no samples to score");
  if (truth.size() != predicted.size()) {
    throw Error(ErrorCode::ShapeMismatch, "truth and prediction lengths differ");
  }
  MetricsReport r;
  r.samples = truth.size();
  r.support.assign(num_classes, 0);
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int c : {truth[i], predicted[i]}) {
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
        throw Error(ErrorCode::LabelOutOfRange, "class " + std::to_string(c) + " outside [0, " +
                                                    std::to_string(num_classes) + ")");
      }
    }
    ++r.confusion[truth[i]][predicted[i]];
    ++r.support[truth[i]];
  }
  std::size_t correct = 0;
  std::vector<std::size_t> predicted_count(num_classes, 0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    correct += r.confusion[c][c];
    for (std::size_t t = 0; t < num_classes; ++t) predicted_count[c] += r.confusion[t][c];
  }
  const double n = static_cast<double>(r.samples);
  r.accuracy = static_cast<double>(correct) / n;
  r.recall_micro = r.accuracy;

  double recall_sum = 0, f1_sum = 0, f1_weighted = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (r.support[c] == 0) continue;
    ++present;
    const double tp = static_cast<double>(r.confusion[c][c]);
    const double recall = tp / static_cast<double>(r.support[c]);
    const double precision = predicted_count[c] ? tp / static_cast<double>(predicted_count[c]) : 0.0;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    recall_sum += recall;
    f1_sum += f1;
    f1_weighted += f1 * static_cast<double>(r.support[c]);
  }
  r.recall_macro = recall_sum / static_cast<double>(present);
  r.f1_macro = f1_sum / static_cast<double>(present);
  r.f1_weighted = f1_weighted / n;
  return r;
}

namespace {

template <typename Fn>
void for_each_batch(const Dataset& data, std::span<const std::size_t> order, int batch_size, Fn&& fn) {
  const auto step = static_cast<std::size_t>(std::max(1, batch_size));
  std::vector<const ClipTensor*> ptrs;
  for (std::size_t start = 0; start < order.size(); start += step) {
    ptrs.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + step); ++i) ptrs.push_back(&data[order[i]].clip);
    fn(make_batch<float>(std::span<const ClipTensor* const>(ptrs)));
  }
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

}  // namespace

MetricsReport evaluate(const ModelParams<float>& params, const ModelConfig& config, const Dataset& data,
                       int batch_size) {
  if (data.empty()) throw Error(ErrorCode::EmptyDataset, "no clips to evaluate");
  auto truth = labels_of(data);
  std::vector<int> predicted;
  Rng rng(0);
  auto order = identity_order(data.size());
  for_each_batch(data, order, batch_size, [&](const Batch<float>& batch) {
    auto logits = forward(batch, params, config, Mode::Eval, rng);
    const std::size_t C = logits.dim(1);
    for (std::size_t b = 0; b < logits.dim(0); ++b) predicted.push_back(argmax(logits.values().subspan(b * C, C)));
  });
  return metrics_from_predictions(truth, predicted, static_cast<std::size_t>(config.num_classes));
}

void write_confusion_csv(std::ostream& out, const MetricsReport& report, const ClassVocabulary& vocabulary) {
  if (vocabulary.size() != report.confusion.size()) {
    throw Error(ErrorCode::ShapeMismatch, "vocabulary and confusion matrix sizes differ");
  }
  for (std::size_t c = 0; c < vocabulary.size(); ++c) out << (c ? "," : "") << vocabulary.name(c);
  out << '\n';
  for (const auto& row : report.confusion) {
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << row[c];
    out << '\n';
  }
}

// --- training -------------------------------------------------------------------------------

std::string to_json_line(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["train_loss"] = log.train_loss;
  j["val_loss"] = log.val_loss;
  j["val_accuracy"] = log.val_accuracy;
  j["lr"] = log.learning_rate;
  return j.dump();
}

std::pair<double, double> evaluate_loss(const ModelParams<float>& params, const ModelConfig& config,
                                        const Dataset& data, int batch_size) {
  if (data.empty()) throw Error(ErrorCode::EmptyDataset, "no clips to evaluate");
  double loss_sum = 0;
  std::size_t correct = 0;
  Rng rng(0);
  auto order = identity_order(data.size());
  for_each_batch(data, order, batch_size, [&](const Batch<float>& batch) {
    auto logits = forward(batch, params, config, Mode::Eval, rng);
    auto loss = ad::cross_entropy(logits, batch.labels);
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      if (argmax(logits.values().subspan(b * C, C)) == batch.labels[b]) ++correct;
    }
  });
  const auto n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

TrainResult train_loop(const Dataset& train, const Dataset& validation, const ModelConfig& model_config,
                       const TrainConfig& train_config, const EpochCallback& on_epoch) {
  model_config.validate();
  train_config.validate();
  if (train.empty() || validation.empty()) {
    throw Error(ErrorCode::EmptyDataset, "training and validation sets must be non-empty");
  }
  for (int label : labels_of(train)) {
    if (label < 0 || label >= model_config.num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(label) + " outside the model's classes");
    }
  }

  TrainResult result;
  ModelParams<float> current = init_params<float>(model_config, train_config.seed);
  result.params = current.clone();
  if (train_config.max_epochs == 0) return result;

  auto params = current.tensors();
  AdamState<float> adam;
  AdamOptions options = AdamOptions::from(train_config);
  PlateauScheduler scheduler(train_config.learning_rate, train_config.scheduler);
  Rng base(train_config.seed);
  auto order = identity_order(train.size());
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::vector<std::vector<float>> grads(params.size());

  for (int epoch = 0; epoch < train_config.max_epochs; ++epoch) {
    Rng shuffle_rng = base.fork(2 * static_cast<std::uint64_t>(epoch) + 1);
    Rng dropout_rng = base.fork(2 * static_cast<std::uint64_t>(epoch) + 2);
    shuffle(std::span<std::size_t>(order), shuffle_rng);

    double loss_sum = 0;
    for_each_batch(train, order, train_config.batch_size, [&](const Batch<float>& batch) {
      auto logits = forward(batch, current, model_config, Mode::Train, dropout_rng);
      auto loss = ad::cross_entropy(logits, batch.labels);
      auto gradient_map = ad::backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) grads[i] = gradient_map.of(params[i]);
      adam_step<float>(params, grads, adam, options);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.labels.size());
    });

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(train.size());
    std::tie(log.val_loss, log.val_accuracy) = evaluate_loss(current, model_config, validation);
    log.learning_rate = options.learning_rate;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (log.val_loss < best_val) {
      best_val = log.val_loss;
      result.best_epoch = epoch;
      result.params = current.clone();
      stale = 0;
    } else {
      ++stale;
    }
    options.learning_rate = scheduler.update(log.val_loss);
    if (stale >= train_config.early_stop_patience) break;
  }
  return result;
}

CrossValidationResult cross_validate(const Dataset& data, const ModelConfig& model_config,
                                     const TrainConfig& train_config,
                                     const std::function<void(int, const EpochLog&)>& on_epoch) {
  train_config.validate();
  auto labels = labels_of(data);
  auto folds = stratified_kfold(labels, train_config.k_folds, train_config.seed);
  CrossValidationResult out;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    TrainConfig fold_config = train_config;
    fold_config.seed = train_config.seed + f;
    Dataset train = subset(data, folds[f].train);
    Dataset val = subset(data, folds[f].validation);
    EpochCallback cb;
    if (on_epoch) cb = [&, f](const EpochLog& log) { on_epoch(static_cast<int>(f), log); };
    auto trained = train_loop(train, val, model_config, fold_config, cb);
    out.folds.push_back(evaluate(trained.params, model_config, val));
    out.models.push_back(std::move(trained.params));
  }
  for (const auto& m : out.folds) {
    out.mean_accuracy += m.accuracy;
    out.mean_recall_micro += m.recall_micro;
    out.mean_recall_macro += m.recall_macro;
    out.mean_f1_macro += m.f1_macro;
    out.mean_f1_weighted += m.f1_weighted;
  }
  const auto k = static_cast<double>(out.folds.size());
  out.mean_accuracy /= k;
  out.mean_recall_micro /= k;
  out.mean_recall_macro /= k;
  out.mean_f1_macro /= k;
  out.mean_f1_weighted /= k;
  return out;
}

}  // namespace tslformer
