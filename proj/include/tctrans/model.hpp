#pragma once

#include <string>
#include <vector>

#include "tctrans/ops.hpp"

namespace tct {

// Network hyperparameters. The bottleneck sits after num_enc_layers stages of
// 2x downsampling, so the input extents must divide evenly and the bottleneck
// channel count must split across attention heads.
struct ModelConfig {
  int in_channels = 3;  // CT + PTV + OAR planes
  int base_width = 8;
  int num_enc_layers = 3;
  int num_transformer_layers = 2;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int input_h = 64;
  int input_w = 64;

  int bottleneck_channels() const { return base_width << (num_enc_layers - 1); }
  int bottleneck_h() const { return input_h >> num_enc_layers; }
  int bottleneck_w() const { return input_w >> num_enc_layers; }
  int num_tokens() const { return bottleneck_h() * bottleneck_w(); }
  int num_dec_layers() const { return num_enc_layers; }

  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Two 3x3 conv + GroupNorm + ReLU stages on the residual branch; the shortcut
// is the identity or a 1x1 projection when the width changes.
template <typename T>
struct ResidualBlock {
  Tensor<T> conv1_w, conv1_b, gn1_g, gn1_b;
  Tensor<T> conv2_w, conv2_b, gn2_g, gn2_b;
  Tensor<T> proj_w, proj_b;  // defined only when in_ch != out_ch
  int groups = 1;

  Tensor<T> forward(const Tensor<T>& x) const;
};

template <typename T>
struct TransformerLayer {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  std::vector<Tensor<T>> wq, bq, wk, bk, wv, bv;  // one set per head
  Tensor<T> wo, bo;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
  int heads = 1;
  int head_dim = 1;

  // attn_sink, when given, receives one detached [M,M] probability matrix per head.
  Tensor<T> forward(const Tensor<T>& z, std::vector<Tensor<T>>* attn_sink) const;
};

template <typename T>
struct EncodeResult {
  Tensor<T> bottleneck;            // [B, C_bottleneck, H/2^L, W/2^L]
  std::vector<Tensor<T>> skips;    // pre-downsample outputs of layers 1..L-1
};

template <typename T>
struct TokenSequence {
  Tensor<T> tokens;         // [M, D] row-major over the bottleneck grid
  Tensor<T> pos_embedding;  // learned parameter, shared handle
  Tensor<T> z0;             // tokens + pos_embedding
};

template <typename T>
struct PredictionBundle {
  Tensor<T> y_hat;                  // [B, 1, H, W]
  std::vector<Tensor<T>> features;  // decoder outputs f^1..f^R, deepest first
};

// Residual CNN encoder, tokenizing transformer bottleneck, skip-connected CNN
// decoder with a linear 1x1 output head.
template <typename T>
class TCtransModel {
 public:
  TCtransModel(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  Tensor<T> param(const std::string& name) const;
  int64_t num_scalars() const;
  void zero_grads();

  EncodeResult<T> encode(const Tensor<T>& x) const;
  TokenSequence<T> tokenize(const Tensor<T>& e) const;
  Tensor<T> transformer_encode(const Tensor<T>& z0) const;
  PredictionBundle<T> decode(const Tensor<T>& e_star,
                             const std::vector<Tensor<T>>& skips) const;
  PredictionBundle<T> forward(const Tensor<T>& x) const;

  // When true, forward() stores detached attention probability matrices
  // (layers x heads, in order) in `attention`.
  bool capture_attention = false;
  mutable std::vector<Tensor<T>> attention;

 private:
  Tensor<T> forward_single(const Tensor<T>& x, PredictionBundle<T>& bundle) const;

  ModelConfig cfg_;
  std::vector<NamedParam<T>> params_;
  std::vector<ResidualBlock<T>> enc_blocks_;
  std::vector<Tensor<T>> down_w_, down_b_;
  Tensor<T> pos_emb_;
  std::vector<TransformerLayer<T>> tf_layers_;
  std::vector<ResidualBlock<T>> dec_blocks_;
  Tensor<T> head_w_, head_b_;
};

// Builds an input batch tensor [B, 1+1+n_oar, H, W] with channel order
// CT, PTV, OAR_1..OAR_n from float planes.
template <typename T>
Tensor<T> stack_input(const std::vector<const Plane*>& channels);

extern template struct ResidualBlock<float>;
extern template struct ResidualBlock<double>;
extern template struct TransformerLayer<float>;
extern template struct TransformerLayer<double>;
extern template class TCtransModel<float>;
extern template class TCtransModel<double>;
extern template Tensor<float> stack_input<float>(const std::vector<const Plane*>&);
extern template Tensor<double> stack_input<double>(const std::vector<const Plane*>&);

}  // namespace tct
