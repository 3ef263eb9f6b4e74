// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Exit status is the number of failures.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tslformer/checkpoint.hpp"
#include "tslformer/error.hpp"
#include "tslformer/landmarks.hpp"
#include "tslformer/model.hpp"
#include "tslformer/rng.hpp"
#include "tslformer/segmentation.hpp"
#include "tslformer/tensor.hpp"
#include "tslformer/training.hpp"

#include "../support/synthetic.hpp"

using namespace tslformer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// --- 1. gradient oracle -----------------------------------------------------------

Outcome gradient_oracle() {
  ModelConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = 2;
  cfg.ffn_dim = 16;
  cfg.num_classes = 3;
  cfg.max_seq_len = 5;
  cfg.dropout_p = 0.2;

  auto params = init_params<double>(cfg, 11);
  // Move biases and gains off their initial constants so no term is trivially zero.
  Rng jitter(12);
  for (auto& [name, t] : params.named()) {
    for (auto& v : t.mutable_values()) v += 0.1 * jitter.normal();
  }

  const std::size_t B = 2, T = 5, F = 6;
  std::vector<double> x(B * T * F);
  Rng data(13);
  for (auto& v : x) v = data.uniform(-1, 1);
  // Clip 0: four DATA rows + EOS. Clip 1: two DATA rows + EOS + two PAD rows.
  std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  for (std::size_t t = 3; t < T; ++t) {
    for (std::size_t f = 0; f < F; ++f) x[(T + t) * F + f] = 0.0;
  }
  auto features = ad::Tensor<double>::constant({B, T, F}, x);
  std::vector<int> labels = {0, 2};

  double worst = 0;
  std::string worst_name;
  std::size_t checked = 0;
  for (Mode mode : {Mode::Eval, Mode::Train}) {
    auto loss_of = [&] {
      Rng rng(99);  // same dropout masks on every call
      return ad::cross_entropy(forward(features, mask, params, cfg, mode, rng), labels);
    };
    auto loss = loss_of();
    auto grads = ad::backward(loss);
    const double h = 1e-5;
    for (auto& [name, t] : params.named()) {
      auto analytic = grads.of(t);
      auto values = t.mutable_values();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double original = values[i];
        values[i] = original + h;
        const double up = loss_of().item();
        values[i] = original - h;
        const double down = loss_of().item();
        values[i] = original;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        if (rel > worst) {
          worst = rel;
          worst_name = name + "[" + std::to_string(i) + "]";
        }
        ++checked;
      }
    }
  }
  return {worst < 1e-4, std::to_string(checked) + " partials (eval + train modes), max relative error " + fmt(worst) +
                            " at " + worst_name};
}

// --- 2. overfit sanity --------------------------------------------------------------

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.hidden_dim = 64;
  cfg.num_heads = 4;
  cfg.num_layers = 2;
  cfg.ffn_dim = 256;
  cfg.num_classes = 3;
  return cfg;
}

Outcome overfit_sanity() {
  auto data = testing::synthetic_dataset(30, 2024);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 8;
  tc.max_epochs = 200;
  tc.early_stop_patience = 200;
  tc.seed = 5;
  int first_hit = -1;
  auto result = train_loop(data, data, small_model(), tc, [&](const EpochLog& e) {
    if (first_hit < 0 && e.val_accuracy >= 0.99) first_hit = e.epoch;
  });
  auto report = evaluate(result.params, small_model(), data);
  return {report.accuracy >= 0.99 && first_hit >= 0,
          "train accuracy " + fmt(report.accuracy) + ", first epoch at >= 0.99: " + std::to_string(first_hit) +
              ", epochs run " + std::to_string(result.log.size())};
}

// --- 3. generalization --------------------------------------------------------------

Outcome generalization() {
  auto pool = testing::synthetic_dataset(150, 31);
  auto test = testing::synthetic_dataset(50, 32);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.seed = 6;
  auto split = stratified_split(labels_of(pool), 0.2, tc.seed);
  auto result = train_loop(subset(pool, split.train), subset(pool, split.test), small_model(), tc);
  auto report = evaluate(result.params, small_model(), test);
  return {report.accuracy >= 0.90, "test accuracy " + fmt(report.accuracy) + " on " + std::to_string(test.size()) +
                                       " clips after " + std::to_string(result.log.size()) + " epochs"};
}

// --- 4. protocol fidelity -------------------------------------------------------------

Outcome protocol_fidelity() {
  Rng rng(404);
  std::size_t worst_case = 0;
  std::string problem;
  for (int trial = 0; trial < 1000 && problem.empty(); ++trial) {
    const std::size_t classes = 2 + rng.below(9);
    std::vector<int> labels;
    std::map<int, std::size_t> count;
    for (std::size_t c = 0; c < classes; ++c) {
      std::size_t n = 5 + rng.below(76);
      for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(c));
      count[static_cast<int>(c)] = n;
    }
    shuffle(std::span<int>(labels), rng);

    auto split = stratified_split(labels, 0.2, rng.next_u64());
    std::vector<int> seen(labels.size(), 0);
    for (auto i : split.train) ++seen[i];
    for (auto i : split.test) ++seen[i];
    if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; })) {
      problem = "split is not a partition (trial " + std::to_string(trial) + ")";
      break;
    }
    std::map<int, std::size_t> test_count;
    for (auto i : split.test) ++test_count[labels[i]];
    for (auto [c, n] : count) {
      if (std::abs(static_cast<double>(test_count[c]) - 0.2 * static_cast<double>(n)) > 1.0) {
        problem = "class " + std::to_string(c) + " test share off by more than 1";
      }
    }

    // Second stage: K = 4 on the training part.
    std::vector<int> pool;
    for (auto i : split.train) pool.push_back(labels[i]);
    auto folds = stratified_kfold(pool, 4, rng.next_u64());
    if (folds.size() != 4) problem = "expected 4 folds";
    std::vector<int> in_validation(pool.size(), 0);
    std::map<int, std::size_t> pool_count;
    for (int l : pool) ++pool_count[l];
    for (const auto& fold : folds) {
      std::vector<int> member(pool.size(), 0);
      for (auto i : fold.train) ++member[i];
      for (auto i : fold.validation) {
        ++member[i];
        ++in_validation[i];
      }
      if (std::any_of(member.begin(), member.end(), [](int s) { return s != 1; })) {
        problem = "fold train/validation is not a partition";
      }
      std::map<int, std::size_t> fold_count;
      for (auto i : fold.validation) ++fold_count[pool[i]];
      for (auto [c, n] : pool_count) {
        if (std::abs(static_cast<double>(fold_count[c]) - static_cast<double>(n) / 4.0) > 1.0) {
          problem = "class " + std::to_string(c) + " fold share off by more than 1";
        }
      }
    }
    if (std::any_of(in_validation.begin(), in_validation.end(), [](int s) { return s != 1; })) {
      problem = "validation folds do not cover every sample exactly once";
    }
    worst_case = std::max(worst_case, labels.size());
  }
  return {problem.empty(), problem.empty() ? "1000 datasets (up to " + std::to_string(worst_case) +
                                                 " samples) partition exactly with per-class counts within 1"
                                           : problem};
}

// --- 5. padding invariance -------------------------------------------------------------

Outcome padding_invariance() {
  ModelConfig cfg;  // full-size defaults
  cfg.num_classes = 10;
  auto params = init_params<float>(cfg, 77);
  Rng rng(78);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<std::vector<float>> frames(n, std::vector<float>(144));
    for (auto& f : frames) {
      for (auto& v : f) v = static_cast<float>(rng.uniform());
    }
    auto sampled = sample_frames(n, 16);
    std::vector<std::vector<float>> picked;
    for (auto i : sampled) picked.push_back(frames[i]);
    auto clip = build_clip_tensor(picked, 144, 16);
    auto base = clip_logits(clip, params, cfg);
    auto extended = clip_logits(clip.padded(1 + rng.below(32)), params, cfg);
    for (std::size_t c = 0; c < base.size(); ++c) {
      worst = std::max(worst, static_cast<double>(std::abs(base[c] - extended[c])));
    }
  }
  return {worst < 1e-5, "100 clips, max logit change " + fmt(worst)};
}

// --- 6. metrics identities ---------------------------------------------------------------

Outcome metrics_identities() {
  std::vector<std::string> problems;
  auto hand = metrics_from_predictions(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 0, 1}, 2);
  const std::vector<std::vector<std::size_t>> confusion = {{2, 0}, {1, 1}};
  if (hand.confusion != confusion) problems.push_back("confusion");
  if (hand.accuracy != 0.75) problems.push_back("accuracy " + fmt(hand.accuracy));
  if (hand.recall_macro != 0.75) problems.push_back("recall_macro " + fmt(hand.recall_macro));
  // per class F1: 2(2/3)(1)/(5/3) = 0.8 and 2(1)(1/2)/(3/2) = 2/3
  const double f1 = (0.8 + 2.0 / 3.0) / 2.0;
  if (std::abs(hand.f1_macro - f1) > 1e-12) problems.push_back("f1_macro " + fmt(hand.f1_macro, 17));

  // Identities over an untrained model's predictions on random synthetic clips.
  Rng rng(606);
  for (int trial = 0; trial < 5; ++trial) {
    auto data = testing::synthetic_dataset(30 + rng.below(30), 600 + static_cast<std::uint64_t>(trial));
    auto cfg = small_model();
    auto params = init_params<float>(cfg, rng.next_u64());
    auto r = evaluate(params, cfg, data);
    if (r.recall_micro != r.accuracy) problems.push_back("recall_micro != accuracy");
    std::vector<std::size_t> support(3, 0);
    for (int l : labels_of(data)) ++support[static_cast<std::size_t>(l)];
    for (std::size_t c = 0; c < 3; ++c) {
      std::size_t row = 0;
      for (auto v : r.confusion[c]) row += v;
      if (row != support[c] || r.support[c] != support[c]) problems.push_back("row sum of class " + std::to_string(c));
    }
  }
  std::string detail = "hand example acc 0.75, recall_macro 0.75, f1_macro " + fmt(hand.f1_macro, 10) +
                       "; identities hold on 5 evaluated datasets";
  if (!problems.empty()) {
    detail = "mismatch:";
    for (auto& p : problems) detail += " " + p;
  }
  return {problems.empty(), detail};
}

// --- 7. loss anchors ----------------------------------------------------------------

Outcome loss_anchors() {
  auto uniform = ad::Tensor<double>::constant({1, 226}, std::vector<double>(226, 0.0));
  const double ce = ad::cross_entropy(uniform, std::vector<int>{17}).item();
  const double ce_err = std::abs(ce - std::log(226.0));

  auto probs = ad::softmax(ad::Tensor<double>::constant({1, 3}, {1.0, 2.0, 3.0}));
  auto sm = probs.values();
  const double expected[] = {0.09003057, 0.24472847, 0.66524096};
  double sm_err = 0;
  for (int i = 0; i < 3; ++i) sm_err = std::max(sm_err, std::abs(sm[i] - expected[i]));
  return {ce_err <= 1e-6 && sm_err <= 1e-7,
          "CE(uniform, C=226) - ln 226 = " + fmt(ce_err) + ", softmax([1,2,3]) max error " + fmt(sm_err)};
}

// --- 8. segmentation determinism -------------------------------------------------------

Outcome segmentation_determinism() {
  // 5 still frames, 30 moving (every keypoint +0.02 in X per frame), 15 still.
  std::vector<StreamFrame> stream;
  double x = 0.5;
  for (int i = 0; i < 50; ++i) {
    if (i >= 5 && i < 35) x += 0.02;
    RawFrame f(144);
    for (std::size_t k = 0; k < 48; ++k) {
      f[k * 3] = static_cast<float>(x);
      f[k * 3 + 1] = 0.4f;
      f[k * 3 + 2] = 0.0f;
    }
    stream.push_back({f, i / 30.0});
  }
  // Moving transitions end on frames 5..34. The third (frame 7) starts
  // recording with look-back to frame 4; the tenth still transition (frame
  // 44) stops it and drops frames 35..44, so the clip is frames 4..34.
  auto first = segment_stream(stream, SegmenterConfig{}, 144);
  auto again = segment_stream(stream, SegmenterConfig{}, 144);
  bool identical = first.size() == again.size();
  for (std::size_t i = 0; identical && i < first.size(); ++i) {
    identical = first[i].first_frame == again[i].first_frame && first[i].last_frame == again[i].last_frame &&
                first[i].frames.size() == again[i].frames.size();
    for (std::size_t j = 0; identical && j < first[i].frames.size(); ++j) {
      identical = first[i].frames[j].features == again[i].frames[j].features;
    }
  }
  bool ok = identical && first.size() == 1 && first[0].first_frame == 4 && first[0].last_frame == 34 &&
            first[0].frames.size() == 31;
  std::string detail = std::to_string(first.size()) + " clip(s)";
  if (!first.empty()) {
    detail += ", frames " + std::to_string(first[0].first_frame) + ".." + std::to_string(first[0].last_frame) + " (" +
              std::to_string(first[0].frames.size()) + " frames)";
  }
  detail += identical ? ", repeat run identical" : ", repeat run differs";
  return {ok, detail};
}

// --- 9. checkpoint round-trip -------------------------------------------------------------

Outcome checkpoint_round_trip() {
  Checkpoint ck;
  ck.config = ModelConfig{};
  std::vector<std::string> names;
  for (int i = 0; i < 226; ++i) names.push_back("sign_" + std::to_string(i));
  ck.vocabulary = ClassVocabulary(names);
  ck.keypoints = LandmarkLayout::standard().keypoint_names();
  ck.seed = 42;
  ck.metrics = {{"val_accuracy", 0.5}};
  ck.params = init_params<float>(ck.config, 42);

  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, ck);
  const std::string bytes = out.str();
  std::istringstream in(bytes, std::ios::binary);
  auto back = read_checkpoint(in);

  bool exact = back.config == ck.config && back.vocabulary == ck.vocabulary && back.keypoints == ck.keypoints &&
               back.seed == ck.seed;
  auto a = ck.params.named();
  auto b = back.params.named();
  exact = exact && a.size() == b.size();
  for (std::size_t i = 0; exact && i < a.size(); ++i) {
    auto va = a[i].second.values();
    auto vb = b[i].second.values();
    exact = a[i].first == b[i].first && a[i].second.shape() == b[i].second.shape() &&
            std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) == 0;
  }

  const std::size_t payload = ck.params.parameter_count() * 4;
  const std::size_t payload_start = bytes.size() - payload;
  Rng rng(9);
  std::size_t detected = 0;
  std::string corrupt = bytes;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t pos = payload_start + rng.below(payload);
    const auto flip = static_cast<char>(1 + rng.below(255));
    corrupt[pos] = static_cast<char>(corrupt[pos] ^ flip);
    try {
      std::istringstream bad(corrupt, std::ios::binary);
      read_checkpoint(bad);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::CorruptPayload) ++detected;
    }
    corrupt[pos] = bytes[pos];
  }
  return {exact && detected == 100, std::string(exact ? "bitwise exact" : "round-trip differs") + " over " +
                                        std::to_string(ck.params.parameter_count()) + " parameters; " +
                                        std::to_string(detected) + "/100 payload flips detected"};
}

// --- 10. CSV round-trip -------------------------------------------------------------------

float random_float(Rng& rng) {
  switch (rng.below(4)) {
    case 0:
      return static_cast<float>(rng.uniform(-1, 1));
    case 1:
      return static_cast<float>(rng.below(2000)) / 1000.0f;
    case 2:
      return static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-30, 30)));
    default: {
      // Any finite bit pattern, subnormals included.
      float f;
      do {
        f = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
      } while (!std::isfinite(f));
      return f;
    }
  }
}

Outcome csv_round_trip() {
  const auto layout = LandmarkLayout::standard();
  Rng rng(1010);
  const std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789_-";
  auto word = [&](std::size_t len) {
    std::string s;
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng.below(alphabet.size())];
    return s;
  };
  std::size_t rows = 0, missing = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<FrameRecord> records(rng.below(8));
    for (auto& r : records) {
      r.video_id = word(1 + rng.below(12));
      r.frame_index = rng.below(2) ? rng.below(1000) : rng.next_u64();
      r.label = rng.below(5) ? word(1 + rng.below(10)) : "";
      r.features.resize(layout.feature_count());
      const double p_missing = rng.uniform(0, 0.5);
      for (auto& v : r.features) {
        if (rng.uniform() < p_missing) {
          ++missing;
        } else {
          v = random_float(rng);
        }
      }
    }
    rows += records.size();
    const std::string text = write_landmark_csv(records, layout);
    auto parsed = parse_landmark_csv(text, layout);
    bool same = parsed.size() == records.size();
    for (std::size_t i = 0; same && i < parsed.size(); ++i) {
      same = parsed[i].video_id == records[i].video_id && parsed[i].frame_index == records[i].frame_index &&
             parsed[i].label == records[i].label;
      for (std::size_t f = 0; same && f < parsed[i].features.size(); ++f) {
        const auto& a = parsed[i].features[f];
        const auto& b = records[i].features[f];
        same = a.has_value() == b.has_value() &&
               (!a || std::bit_cast<std::uint32_t>(*a) == std::bit_cast<std::uint32_t>(*b));
      }
    }
    if (!same) return {false, "record set " + std::to_string(trial) + " did not survive write then parse"};
    if (write_landmark_csv(parsed, layout) != text) {
      return {false, "record set " + std::to_string(trial) + " rewrites to different text"};
    }
  }
  return {true, "1000 record sets, " + std::to_string(rows) + " rows, " + std::to_string(missing) +
                    " None values, bit-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient_oracle", gradient_oracle},
      {"overfit_sanity", overfit_sanity},
      {"generalization", generalization},
      {"protocol_fidelity", protocol_fidelity},
      {"padding_invariance", padding_invariance},
      {"metrics_identities", metrics_identities},
      {"loss_anchors", loss_anchors},
      {"segmentation_determinism", segmentation_determinism},
      {"checkpoint_round_trip", checkpoint_round_trip},
      {"csv_round_trip", csv_round_trip},
  };
  const std::map<std::string, double> time_limit_s = {{"gradient_oracle", 60}, {"overfit_sanity", 300}};

  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (auto limit = time_limit_s.find(name); limit != time_limit_s.end() && seconds >= limit->second) {
      outcome.pass = false;
      outcome.detail += "; over the " + fmt(limit->second) + " s budget";
    }
    std::cout << (outcome.pass ? "PASS " : "FAIL ") << std::left << std::setw(26) << name << outcome.detail << " ["
              << std::fixed << std::setprecision(2) << seconds << " s]" << std::defaultfloat << std::endl;
    failures += outcome.pass ? 0 : 1;
  }
  return failures;
}
