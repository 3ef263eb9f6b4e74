#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tslformer/landmarks.hpp"
#include "tslformer/model.hpp"
#include "tslformer/tensor.hpp"

namespace tslformer {

/// Reduce-on-plateau settings driven by validation loss.
struct SchedulerConfig {
  double factor = 0.5;
  int patience = 2;
  double threshold = 1e-4;  // absolute improvement that resets the counter
  double min_lr = 1e-6;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int max_epochs = 50;
  SchedulerConfig scheduler;
  int early_stop_patience = 5;
  int k_folds = 4;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  /// Throws BadConfig.
  void validate() const;
};

// --- optimizer --------------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamOptions from(const TrainConfig& config);
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update applied in place to `params`. `grads`
/// is aligned with `params`. Throws ShapeMismatch.
template <typename T>
void adam_step(std::span<ad::Tensor<T>> params, std::span<const std::vector<T>> grads,
               AdamState<T>& state, const AdamOptions& options);

class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, SchedulerConfig config);

  /// Feeds one validation loss and returns the learning rate to use next.
  double update(double validation_loss);

  double learning_rate() const noexcept { return lr_; }
  int stale_epochs() const noexcept { return stale_; }

 private:
  double lr_;
  SchedulerConfig config_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

// --- protocols ----------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train;  // ascending indices into the input
  std::vector<std::size_t> test;
};

/// Per class: max(1, round(n_c * test_fraction)) samples to test, capped
/// at n_c - 1. Throws ClassTooSmall when a class has fewer than 2 samples.
Split stratified_split(std::span<const int> labels, double test_fraction, std::uint64_t seed);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Shuffled per class, then dealt round-robin to K folds with a cursor that
/// carries over between classes. Throws ClassTooSmall when a class has
/// fewer than K samples.
std::vector<Fold> stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed);

// --- data ---------------------------------------------------------------------------

struct LabeledClip {
  std::string video_id;
  ClipTensor clip;  // clip.label_index holds the class
};

using Dataset = std::vector<LabeledClip>;

std::vector<int> labels_of(const Dataset& data);
Dataset subset(const Dataset& data, std::span<const std::size_t> indices);

/// Groups CSV rows into clips and maps labels through the vocabulary.
Dataset build_dataset(std::span<const FrameRecord> records, const ClassVocabulary& vocabulary,
                      const FrameSampler& sampler, std::size_t t_data, std::size_t feature_count,
                      double assumed_fps = 30.0);

// --- metrics ------------------------------------------------------------------------

struct MetricsReport {
  std::size_t samples = 0;
  double accuracy = 0;
  double recall_micro = 0;
  double recall_macro = 0;
  double f1_macro = 0;
  double f1_weighted = 0;
  std::vector<std::size_t> support;             // true-class counts
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Macro averages run over classes that occur in `truth`.
MetricsReport metrics_from_predictions(std::span<const int> truth, std::span<const int> predicted,
                                       std::size_t num_classes);

/// Eval-mode argmax predictions scored against the clip labels.
MetricsReport evaluate(const ModelParams<float>& params, const ModelConfig& config, const Dataset& data,
                       int batch_size = 64);

/// Header of class names, then one row of integers per true class.
void write_confusion_csv(std::ostream& out, const MetricsReport& report,
                         const ClassVocabulary& vocabulary);

// --- training loop --------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double learning_rate = 0;
};

/// `{"epoch":..,"train_loss":..,"val_loss":..,"val_accuracy":..,"lr":..}`
std::string to_json_line(const EpochLog& log);

struct TrainResult {
  ModelParams<float> params;  // from the epoch with the lowest validation loss
  std::vector<EpochLog> log;
  int best_epoch = -1;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mean loss and accuracy in eval mode.
std::pair<double, double> evaluate_loss(const ModelParams<float>& params, const ModelConfig& config,
                                        const Dataset& data, int batch_size = 64);

/// Seeded shuffle per epoch, Adam on mini-batches, validation each epoch,
/// plateau scheduling and early stopping on validation loss.
TrainResult train_loop(const Dataset& train, const Dataset& validation, const ModelConfig& model_config,
                       const TrainConfig& train_config, const EpochCallback& on_epoch = {});

struct CrossValidationResult {
  std::vector<MetricsReport> folds;
  std::vector<ModelParams<float>> models;  // one per fold, best validation epoch
  double mean_accuracy = 0;
  double mean_recall_micro = 0;
  double mean_recall_macro = 0;
  double mean_f1_macro = 0;
  double mean_f1_weighted = 0;
};

/// Trains K independent models on stratified folds of `data` and averages
/// their validation metrics.
CrossValidationResult cross_validate(const Dataset& data, const ModelConfig& model_config,
                                     const TrainConfig& train_config,
                                     const std::function<void(int, const EpochLog&)>& on_epoch = {});

}  // namespace tslformer
