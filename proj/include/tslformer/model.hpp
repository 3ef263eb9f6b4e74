#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tslformer/landmarks.hpp"
#include "tslformer/rng.hpp"
#include "tslformer/tensor.hpp"

namespace tslformer {

struct ModelConfig {
  int input_dim = 144;
  int hidden_dim = 512;
  int num_heads = 4;
  int num_layers = 2;
  int ffn_dim = 2048;
  double dropout_p = 0.2;
  int num_classes = 226;
  int max_seq_len = 17;  // data frames + EOS
  double layer_norm_eps = 1e-5;
  // dropout sites, separable for ablation
  bool embedding_dropout = true;
  bool sublayer_dropout = true;

  /// Throws BadConfig.
  void validate() const;
  std::size_t data_frames() const { return static_cast<std::size_t>(max_seq_len - 1); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Mode { Train, Eval };

template <typename T>
struct EncoderLayerParams {
  ad::Tensor<T> query_weight, query_bias;
  ad::Tensor<T> key_weight, key_bias;
  ad::Tensor<T> value_weight, value_bias;
  ad::Tensor<T> output_weight, output_bias;
  ad::Tensor<T> ffn_in_weight, ffn_in_bias;
  ad::Tensor<T> ffn_out_weight, ffn_out_bias;
  ad::Tensor<T> attention_norm_gain, attention_norm_bias;
  ad::Tensor<T> ffn_norm_gain, ffn_norm_bias;
};

template <typename T>
struct ModelParams {
  ad::Tensor<T> embed_weight, embed_bias;
  std::vector<EncoderLayerParams<T>> layers;
  ad::Tensor<T> final_norm_gain, final_norm_bias;
  ad::Tensor<T> classifier_weight, classifier_bias;

  /// Every tensor with a stable dotted name, in serialization order.
  std::vector<std::pair<std::string, ad::Tensor<T>>> named() const;
  std::vector<ad::Tensor<T>> tensors() const;
  std::size_t parameter_count() const;

  /// Deep copy, optionally in another precision.
  template <typename U>
  ModelParams<U> cast() const;
  ModelParams clone() const { return cast<T>(); }
};

/// Glorot-uniform weights, zero biases, unit norm gains. Deterministic per seed.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Builds a parameter set from named tensors in `named()` order; used by
/// checkpoint loading. Throws ShapeMismatch.
template <typename T>
ModelParams<T> params_from_named(const ModelConfig& config,
                                 std::vector<std::pair<std::string, std::vector<T>>> tensors);

/// Shapes of every parameter in `named()` order.
std::vector<std::pair<std::string, ad::Shape>> parameter_shapes(const ModelConfig& config);

/// Sinusoidal table: PE(p, 2i) = sin(p / 10000^(2i/d)), PE(p, 2i+1) = cos(...).
/// Row-major [T x d]. Throws OddDimension.
std::vector<double> positional_encoding(std::size_t length, std::size_t dim);

/// A stack of equal-length clips.
template <typename T>
struct Batch {
  ad::Tensor<T> features;          // [B x T x F]
  std::vector<std::uint8_t> mask;  // [B x T], 1 for DATA and EOS
  std::vector<int> labels;         // filled when every clip has a label
};

/// Clips shorter than the longest one are extended with PAD rows.
template <typename T>
Batch<T> make_batch(std::span<const ClipTensor* const> clips);
template <typename T>
Batch<T> make_batch(std::span<const ClipTensor> clips);

/// Per head: softmax(Q K^T / sqrt(d/h)) V with PAD keys removed; heads are
/// concatenated and output-projected. When `weights` is non-null it
/// receives the [B*h x T x T] attention matrix.
template <typename T>
ad::Tensor<T> multi_head_attention(const ad::Tensor<T>& x, std::span<const std::uint8_t> mask,
                                   const EncoderLayerParams<T>& layer, std::size_t heads,
                                   ad::Tensor<T>* weights = nullptr);

/// Post-norm block: y = LN(x + drop(MHA(x))), out = LN(y + drop(FFN(y))).
template <typename T>
ad::Tensor<T> encoder_layer(const ad::Tensor<T>& x, std::span<const std::uint8_t> mask,
                            const EncoderLayerParams<T>& layer, const ModelConfig& config, Mode mode,
                            Rng& rng);

/// embed -> +PE -> dropout -> encoder stack -> final norm -> masked mean
/// pool -> classifier. Returns [B x num_classes] logits. Throws
/// SequenceTooLong when an attendable row lies beyond max_seq_len; PAD rows
/// past it are allowed.
template <typename T>
ad::Tensor<T> forward(const ad::Tensor<T>& features, std::span<const std::uint8_t> mask,
                      const ModelParams<T>& params, const ModelConfig& config, Mode mode, Rng& rng);

template <typename T>
ad::Tensor<T> forward(const Batch<T>& batch, const ModelParams<T>& params, const ModelConfig& config,
                      Mode mode, Rng& rng);

/// Eval-mode logits for one clip.
std::vector<float> clip_logits(const ClipTensor& clip, const ModelParams<float>& params,
                               const ModelConfig& config);

struct ScoredClass {
  int index = 0;
  double probability = 0;
};

/// Softmax, then the k most probable classes; ties go to the lower index.
/// Throws BadK unless 1 <= k <= C.
std::vector<ScoredClass> predict_topk(std::span<const float> logits, std::size_t k);
std::vector<ScoredClass> predict_topk(std::span<const double> logits, std::size_t k);

/// Index of the largest logit, lowest index on ties.
int argmax(std::span<const float> logits);

}  // namespace tslformer
