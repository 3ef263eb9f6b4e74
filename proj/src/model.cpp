#include "tslformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tslformer/error.hpp"

namespace tslformer {

using ad::Shape;
using ad::Tensor;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::BadConfig, what); };
  if (input_dim < 1 || hidden_dim < 1 || num_heads < 1 || num_layers < 1 || ffn_dim < 1 ||
      num_classes < 1) {
    fail("all model dimensions must be at least 1");
  }
  if (max_seq_len < 1) fail("max_seq_len must be at least 1");
  if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
  if (hidden_dim % 2 != 0) fail("hidden_dim must be even for the sinusoidal encoding");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must be in [0, 1)");
  if (!(layer_norm_eps >= 0.0)) fail("layer_norm_eps must be non-negative");
}

// --- parameter bookkeeping ------------------------------------------------------

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  const auto F = static_cast<std::size_t>(c.input_dim);
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  const auto f = static_cast<std::size_t>(c.ffn_dim);
  const auto C = static_cast<std::size_t>(c.num_classes);
  std::vector<std::pair<std::string, Shape>> shapes;
  shapes.emplace_back("embed.weight", Shape{F, d});
  shapes.emplace_back("embed.bias", Shape{d});
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* proj : {"query", "key", "value", "output"}) {
      shapes.emplace_back(p + "attention." + proj + ".weight", Shape{d, d});
      shapes.emplace_back(p + "attention." + proj + ".bias", Shape{d});
    }
    shapes.emplace_back(p + "ffn.in.weight", Shape{d, f});
    shapes.emplace_back(p + "ffn.in.bias", Shape{f});
    shapes.emplace_back(p + "ffn.out.weight", Shape{f, d});
    shapes.emplace_back(p + "ffn.out.bias", Shape{d});
    shapes.emplace_back(p + "attention_norm.gain", Shape{d});
    shapes.emplace_back(p + "attention_norm.bias", Shape{d});
    shapes.emplace_back(p + "ffn_norm.gain", Shape{d});
    shapes.emplace_back(p + "ffn_norm.bias", Shape{d});
  }
  shapes.emplace_back("final_norm.gain", Shape{d});
  shapes.emplace_back("final_norm.bias", Shape{d});
  shapes.emplace_back("classifier.weight", Shape{d, C});
  shapes.emplace_back("classifier.bias", Shape{C});
  return shapes;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("embed.weight", embed_weight);
  out.emplace_back("embed.bias", embed_bias);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attention.query.weight", L.query_weight);
    out.emplace_back(p + "attention.query.bias", L.query_bias);
    out.emplace_back(p + "attention.key.weight", L.key_weight);
    out.emplace_back(p + "attention.key.bias", L.key_bias);
    out.emplace_back(p + "attention.value.weight", L.value_weight);
    out.emplace_back(p + "attention.value.bias", L.value_bias);
    out.emplace_back(p + "attention.output.weight", L.output_weight);
    out.emplace_back(p + "attention.output.bias", L.output_bias);
    out.emplace_back(p + "ffn.in.weight", L.ffn_in_weight);
    out.emplace_back(p + "ffn.in.bias", L.ffn_in_bias);
    out.emplace_back(p + "ffn.out.weight", L.ffn_out_weight);
    out.emplace_back(p + "ffn.out.bias", L.ffn_out_bias);
    out.emplace_back(p + "attention_norm.gain", L.attention_norm_gain);
    out.emplace_back(p + "attention_norm.bias", L.attention_norm_bias);
    out.emplace_back(p + "ffn_norm.gain", L.ffn_norm_gain);
    out.emplace_back(p + "ffn_norm.bias", L.ffn_norm_bias);
  }
  out.emplace_back("final_norm.gain", final_norm_gain);
  out.emplace_back("final_norm.bias", final_norm_bias);
  out.emplace_back("classifier.weight", classifier_weight);
  out.emplace_back("classifier.bias", classifier_bias);
  return out;
}

template <typename T>
std::vector<Tensor<T>> ModelParams<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

namespace {

template <typename T>
ModelParams<T> assemble(std::size_t num_layers, std::vector<Tensor<T>> flat) {
  ModelParams<T> p;
  std::size_t i = 0;
  auto take = [&]() -> Tensor<T> { return flat.at(i++); };
  p.embed_weight = take();
  p.embed_bias = take();
  p.layers.resize(num_layers);
  for (auto& L : p.layers) {
    L.query_weight = take();
    L.query_bias = take();
    L.key_weight = take();
    L.key_bias = take();
    L.value_weight = take();
    L.value_bias = take();
    L.output_weight = take();
    L.output_bias = take();
    L.ffn_in_weight = take();
    L.ffn_in_bias = take();
    L.ffn_out_weight = take();
    L.ffn_out_bias = take();
    L.attention_norm_gain = take();
    L.attention_norm_bias = take();
    L.ffn_norm_gain = take();
    L.ffn_norm_bias = take();
  }
  p.final_norm_gain = take();
  p.final_norm_bias = take();
  p.classifier_weight = take();
  p.classifier_bias = take();
  return p;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  std::vector<Tensor<U>> flat;
  for (const auto& t : tensors()) {
    std::vector<U> values(t.values().begin(), t.values().end());
    flat.push_back(Tensor<U>::parameter(t.shape(), std::move(values)));
  }
  return assemble<U>(layers.size(), std::move(flat));
}

template <typename T>
ModelParams<T> params_from_named(const ModelConfig& config,
                                 std::vector<std::pair<std::string, std::vector<T>>> tensors) {
  config.validate();
  auto shapes = parameter_shapes(config);
  if (tensors.size() != shapes.size()) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(shapes.size()) +
                                              " parameter tensors, got " +
                                              std::to_string(tensors.size()));
  }
  std::vector<Tensor<T>> flat;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto& [name, values] = tensors[i];
    if (name != shapes[i].first) {
      throw Error(ErrorCode::ShapeMismatch, "parameter " + std::to_string(i) + " is '" + name +
                                                "', expected '" + shapes[i].first + "'");
    }
    flat.push_back(Tensor<T>::parameter(shapes[i].second, std::move(values)));
  }
  return assemble<T>(static_cast<std::size_t>(config.num_layers), std::move(flat));
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::vector<std::pair<std::string, std::vector<T>>> tensors;
  for (auto& [name, shape] : parameter_shapes(config)) {
    std::vector<T> values(ad::numel(shape), T(0));
    if (ends_with(name, ".weight")) {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
    } else if (ends_with(name, ".gain")) {
      std::fill(values.begin(), values.end(), T(1));
    }
    tensors.emplace_back(name, std::move(values));
  }
  return params_from_named<T>(config, std::move(tensors));
}

// --- building blocks ------------------------------------------------------------

std::vector<double> positional_encoding(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) {
    throw Error(ErrorCode::OddDimension, "positional encoding needs an even width, got " +
                                             std::to_string(dim));
  }
  std::vector<double> table(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      double angle = static_cast<double>(pos) /
                     std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      table[pos * dim + 2 * i] = std::sin(angle);
      table[pos * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return table;
}

template <typename T>
Batch<T> make_batch(std::span<const ClipTensor* const> clips) {
  if (clips.empty()) throw Error(ErrorCode::EmptyDataset, "cannot batch zero clips");
  const std::size_t width = clips.front()->width;
  std::size_t length = 0;
  for (const auto* c : clips) {
    if (c->width != width) throw Error(ErrorCode::ShapeMismatch, "clips in a batch differ in width");
    length = std::max(length, c->length);
  }
  const std::size_t B = clips.size();
  std::vector<T> values(B * length * width, T(0));
  Batch<T> batch;
  batch.mask.assign(B * length, 0);
  bool labelled = true;
  for (std::size_t b = 0; b < B; ++b) {
    const ClipTensor& c = *clips[b];
    std::copy(c.features.begin(), c.features.end(), values.begin() + b * length * width);
    for (std::size_t t = 0; t < c.length; ++t) batch.mask[b * length + t] = c.kinds[t] != FrameKind::Pad;
    if (c.label_index) {
      batch.labels.push_back(*c.label_index);
    } else {
      labelled = false;
    }
  }
  if (!labelled) batch.labels.clear();
  batch.features = Tensor<T>::constant({B, length, width}, std::move(values));
  return batch;
}

template <typename T>
Batch<T> make_batch(std::span<const ClipTensor> clips) {
  std::vector<const ClipTensor*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);
  return make_batch<T>(std::span<const ClipTensor* const>(ptrs));
}

namespace {

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return ad::add_broadcast(ad::matmul(x, weight), bias);
}

}  // namespace

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                               const EncoderLayerParams<T>& layer, std::size_t heads,
                               Tensor<T>* weights) {
  if (x.rank() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "attention expects [B x T x d], got " + ad::shape_string(x.shape()));
  }
  const std::size_t B = x.dim(0), T_ = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw Error(ErrorCode::ShapeMismatch, "width " + std::to_string(d) + " is not divisible by " +
                                              std::to_string(heads) + " heads");
  }
  if (mask.size() != B * T_) {
    throw Error(ErrorCode::ShapeMismatch, "mask size " + std::to_string(mask.size()) +
                                              " does not match " + ad::shape_string(x.shape()));
  }
  const std::size_t dk = d / heads;

  Tensor<T> q = ad::split_heads(affine(x, layer.query_weight, layer.query_bias), heads);
  Tensor<T> k = ad::split_heads(affine(x, layer.key_weight, layer.key_bias), heads);
  Tensor<T> v = ad::split_heads(affine(x, layer.value_weight, layer.value_bias), heads);

  std::vector<std::uint8_t> head_mask(B * heads * T_);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      std::copy_n(mask.begin() + b * T_, T_, head_mask.begin() + (b * heads + h) * T_);

  Tensor<T> scores = ad::scale(ad::batched_matmul(q, k, true), T(1) / std::sqrt(static_cast<T>(dk)));
  Tensor<T> attn = ad::masked_softmax(scores, head_mask);
  if (weights) *weights = attn;
  Tensor<T> context = ad::merge_heads(ad::batched_matmul(attn, v), heads);
  return affine(context, layer.output_weight, layer.output_bias);
}

template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                        const EncoderLayerParams<T>& layer, const ModelConfig& config, Mode mode,
                        Rng& rng) {
  const bool training = mode == Mode::Train && config.sublayer_dropout;
  const T eps = static_cast<T>(config.layer_norm_eps);
  Tensor<T> attn = multi_head_attention(x, mask, layer, static_cast<std::size_t>(config.num_heads));
  attn = ad::dropout(attn, config.dropout_p, training, rng);
  Tensor<T> y = ad::layer_norm(ad::add(x, attn), layer.attention_norm_gain, layer.attention_norm_bias, eps);

  Tensor<T> hidden = ad::relu(affine(y, layer.ffn_in_weight, layer.ffn_in_bias));
  Tensor<T> ffn = affine(hidden, layer.ffn_out_weight, layer.ffn_out_bias);
  ffn = ad::dropout(ffn, config.dropout_p, training, rng);
  return ad::layer_norm(ad::add(y, ffn), layer.ffn_norm_gain, layer.ffn_norm_bias, eps);
}

template <typename T>
Tensor<T> forward(const Tensor<T>& features, std::span<const std::uint8_t> mask,
                  const ModelParams<T>& params, const ModelConfig& config, Mode mode, Rng& rng) {
  if (features.rank() != 3 || features.dim(2) != static_cast<std::size_t>(config.input_dim)) {
    throw Error(ErrorCode::ShapeMismatch, "input " + ad::shape_string(features.shape()) +
                                              " does not have width " + std::to_string(config.input_dim));
  }
  const std::size_t B = features.dim(0);
  const std::size_t T_ = features.dim(1);
  if (mask.size() != B * T_) {
    throw Error(ErrorCode::ShapeMismatch, "mask has " + std::to_string(mask.size()) + " entries for " +
                                              ad::shape_string(features.shape()));
  }
  // Trailing PAD rows are free; only the attendable extent counts.
  std::size_t extent = 0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = T_; t > extent; --t) {
      if (mask[b * T_ + t - 1]) {
        extent = t;
        break;
      }
    }
  }
  if (extent > static_cast<std::size_t>(config.max_seq_len)) {
    throw Error(ErrorCode::SequenceTooLong, "sequence of " + std::to_string(extent) +
                                                " frames exceeds max_seq_len " +
                                                std::to_string(config.max_seq_len));
  }
  const auto d = static_cast<std::size_t>(config.hidden_dim);
  auto table = positional_encoding(T_, d);
  Tensor<T> pe = Tensor<T>::constant({T_, d}, std::vector<T>(table.begin(), table.end()));

  Tensor<T> h = affine(features, params.embed_weight, params.embed_bias);
  h = ad::add_broadcast(h, pe);
  h = ad::dropout(h, config.dropout_p, mode == Mode::Train && config.embedding_dropout, rng);
  for (const auto& layer : params.layers) h = encoder_layer(h, mask, layer, config, mode, rng);
  h = ad::layer_norm(h, params.final_norm_gain, params.final_norm_bias, static_cast<T>(config.layer_norm_eps));
  Tensor<T> pooled = ad::masked_mean_pool(h, mask);
  return affine(pooled, params.classifier_weight, params.classifier_bias);
}

template <typename T>
Tensor<T> forward(const Batch<T>& batch, const ModelParams<T>& params, const ModelConfig& config,
                  Mode mode, Rng& rng) {
  return forward(batch.features, batch.mask, params, config, mode, rng);
}

std::vector<float> clip_logits(const ClipTensor& clip, const ModelParams<float>& params,
                               const ModelConfig& config) {
  const ClipTensor* one[] = {&clip};
  auto batch = make_batch<float>(std::span<const ClipTensor* const>(one));
  Rng rng(0);
  auto logits = forward(batch, params, config, Mode::Eval, rng);
  return std::vector<float>(logits.values().begin(), logits.values().end());
}

// --- prediction -----------------------------------------------------------------

namespace {

template <typename T>
std::vector<ScoredClass> topk_impl(std::span<const T> logits, std::size_t k) {
  if (k < 1 || k > logits.size()) {
    throw Error(ErrorCode::BadK, "k = " + std::to_string(k) + " outside [1, " +
                                     std::to_string(logits.size()) + "]");
  }
  double peak = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  std::vector<double> probs(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(static_cast<double>(logits[i]) - peak);
    total += probs[i];
  }
  for (auto& p : probs) p /= total;
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  std::vector<ScoredClass> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], probs[order[i]]});
  return out;
}

}  // namespace

std::vector<ScoredClass> predict_topk(std::span<const float> logits, std::size_t k) {
  return topk_impl(logits, k);
}

std::vector<ScoredClass> predict_topk(std::span<const double> logits, std::size_t k) {
  return topk_impl(logits, k);
}

int argmax(std::span<const float> logits) {
  if (logits.empty()) throw Error(ErrorCode::BadK, "argmax of empty logits");
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

#define TSLFORMER_INSTANTIATE(T)                                                                   \
  template struct ModelParams<T>;                                                                  \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                       \
  template ModelParams<T> params_from_named<T>(const ModelConfig&,                                 \
                                               std::vector<std::pair<std::string, std::vector<T>>>); \
  template Batch<T> make_batch<T>(std::span<const ClipTensor* const>);                             \
  template Batch<T> make_batch<T>(std::span<const ClipTensor>);                                    \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, std::span<const std::uint8_t>,      \
                                             const EncoderLayerParams<T>&, std::size_t, Tensor<T>*); \
  template Tensor<T> encoder_layer<T>(const Tensor<T>&, std::span<const std::uint8_t>,             \
                                      const EncoderLayerParams<T>&, const ModelConfig&, Mode, Rng&); \
  template Tensor<T> forward<T>(const Tensor<T>&, std::span<const std::uint8_t>,                   \
                                const ModelParams<T>&, const ModelConfig&, Mode, Rng&);            \
  template Tensor<T> forward<T>(const Batch<T>&, const ModelParams<T>&, const ModelConfig&, Mode, Rng&);

TSLFORMER_INSTANTIATE(float)
TSLFORMER_INSTANTIATE(double)

#undef TSLFORMER_INSTANTIATE

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace tslformer
