// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Vision encoder with region transformer layers.
//
// The first T−R layers are ordinary pre-norm transformer blocks over the cls
// and patch tokens. In each of the last R layers the patch stream keeps doing
// global self-attention while a second stream of per-region queries attends
// to that layer's patch tokens under a visibility mask, sharing the layer's
// weights. Region queries start as the mean of each region's visible patch
// embeddings entering the first region layer. The region stream never feeds
// back into the patch stream.
//
// Forward passes record a cache; backward passes accumulate parameter
// gradients into an EncoderParams of the same configuration.

#pragma once

#include <cstdint>
#include <utility>
#include <limits>
#include <string>
#include <vector>

#include "rice/region_data.hpp"
#include "rice/tensor.hpp"

namespace rice {

struct EncoderConfig {
  int layers = 6;         // T
  int region_layers = 2;  // R, the last R layers
  int heads = 4;
  int dim = 64;           // D
  int patch = 16;         // p
  int height = 64;
  int width = 64;
  int channels = 3;
  int mlp_hidden = 128;

  int grid_rows() const { return height / patch; }
  int grid_cols() const { return width / patch; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int patch_dim() const { return patch * patch * channels; }
  int head_dim() const { return dim / heads; }

  /// Throws ConfigError on any broken invariant (D % h, 1 ≤ R < T, ...).
  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
struct AttentionWeights {
  Matrix<T> wq, bq, wk, bk, wv, bv, wo, bo;  // W: D×D, b: 1×D
  int heads = 1;
};

template <typename T>
struct LayerParams {
  Matrix<T> ln1_g, ln1_b;
  AttentionWeights<T> attn;
  Matrix<T> ln2_g, ln2_b;
  Matrix<T> w1, b1, w2, b2;  // D×F, 1×F, F×D, 1×D
};

template <typename T>
struct EncoderParams {
  EncoderConfig config;
  Matrix<T> patch_w, patch_b;  // P×D, 1×D
  Matrix<T> cls;               // 1×D
  Matrix<T> pos;               // (1+N_p)×D
  std::vector<LayerParams<T>> layers;
  Matrix<T> ln_post_g, ln_post_b;

  /// All-zero parameters (also the gradient accumulator shape).
  static EncoderParams zeros(const EncoderConfig& config);
  static EncoderParams init(const EncoderConfig& config, std::uint64_t seed);

  /// Every tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Matrix<T>*>> tensors();
  std::vector<std::pair<std::string, const Matrix<T>*>> tensors() const;

  template <typename U>
  EncoderParams<U> cast() const;

  EncoderParams& operator+=(const EncoderParams& other);
};

template <typename T>
template <typename U>
EncoderParams<U> EncoderParams<T>::cast() const {
  auto out = EncoderParams<U>::zeros(config);
  auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

/// True for tensors exempt from weight decay (biases, norms, embeddings).
bool is_no_decay(const std::string& name);

template <typename T>
struct TokenSequence {
  Matrix<T> cls;      // 1×D
  Matrix<T> patches;  // N_p×D, row-major over the patch grid
  int rows = 0;
  int cols = 0;
  int patch = 0;
};

/// One row per region over the N_p patch tokens. Entries are 0 (visible) or
/// the −∞ sentinel; every row has at least one visible token.
class VisibilityMask {
 public:
  VisibilityMask() = default;
  VisibilityMask(std::size_t regions, std::size_t tokens);

  std::size_t regions() const { return regions_; }
  std::size_t tokens() const { return tokens_; }
  bool visible(std::size_t r, std::size_t j) const { return visible_[r * tokens_ + j] != 0; }
  void set_visible(std::size_t r, std::size_t j, bool v) { visible_[r * tokens_ + j] = v ? 1 : 0; }
  std::size_t visible_count(std::size_t r) const;

  /// Additive mask value: 0 when visible, lowest finite value otherwise.
  template <typename T>
  T value(std::size_t r, std::size_t j) const {
    return visible(r, j) ? T(0) : std::numeric_limits<T>::lowest();
  }

  /// Throws std::invalid_argument if some row has no visible token.
  void validate() const;

 private:
  std::size_t regions_ = 0;
  std::size_t tokens_ = 0;
  std::vector<std::uint8_t> visible_;
};

/// Patch token (r, c) is visible for a region iff its center pixel lies in
/// the bbox; a region containing no center sees the single patch with the
/// largest overlap (ties to the smallest row-major index).
VisibilityMask build_visibility_mask(const std::vector<Region>& regions, int rows, int cols, int patch);

template <typename T>
TokenSequence<T> patchify(const Image& image, const EncoderParams<T>& params);

// ---------------------------------------------------------------------------
// Region attention

template <typename T>
struct AttentionCache {
  Matrix<T> queries_in, tokens_in;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // per head, L × N_p
  Matrix<T> concat;              // L × D, heads side by side
};

/// Per head: softmax(q K^T / sqrt(d_k) + M) V over the patch tokens; heads
/// are concatenated and output-projected. Masked positions get exactly zero
/// weight. queries: L×D, tokens: N_p×D.
template <typename T>
Matrix<T> region_attention(const Matrix<T>& queries, const Matrix<T>& tokens, const VisibilityMask& mask,
                           const AttentionWeights<T>& weights, AttentionCache<T>* cache = nullptr);

/// Backward of region_attention; accumulates weight gradients into `grads`
/// and adds the input gradients into d_queries / d_tokens (which must
/// already have the input shapes).
template <typename T>
void region_attention_backward(const AttentionCache<T>& cache, const Matrix<T>& d_out,
                               const VisibilityMask& mask, const AttentionWeights<T>& weights,
                               AttentionWeights<T>& grads, Matrix<T>& d_queries, Matrix<T>& d_tokens);

/// (L, B, D) region batch: element (l, b, :) is region l of image b.
template <typename T>
struct RegionBatchTensor {
  std::size_t regions = 0, batch = 0, dim = 0;
  std::vector<T> data;

  RegionBatchTensor() = default;
  RegionBatchTensor(std::size_t l, std::size_t b, std::size_t d) : regions(l), batch(b), dim(d), data(l * b * d) {}
  T& at(std::size_t l, std::size_t b, std::size_t d) { return data[(l * batch + b) * dim + d]; }
  const T& at(std::size_t l, std::size_t b, std::size_t d) const { return data[(l * batch + b) * dim + d]; }
};

/// Batched form: queries (L, B, D), per-image tokens and masks → (L, B, D).
template <typename T>
RegionBatchTensor<T> region_attention_batched(const RegionBatchTensor<T>& queries,
                                              const std::vector<Matrix<T>>& tokens,
                                              const std::vector<VisibilityMask>& masks,
                                              const AttentionWeights<T>& weights);

// ---------------------------------------------------------------------------
// Full encoder

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
struct BlockCache {
  Matrix<T> x_in;
  LayerNormCache<T> ln1;
  Matrix<T> h1;
  AttentionCache<T> attn;
  Matrix<T> x_mid;
  LayerNormCache<T> ln2;
  Matrix<T> h2;
  Matrix<T> pre_act;
  Matrix<T> act;
};

template <typename T>
struct EncodeCache {
  Matrix<T> patches_in;  // N_p × P raw patch pixels
  std::vector<BlockCache<T>> patch_blocks;   // one per layer
  std::vector<BlockCache<T>> region_blocks;  // one per region layer
  Matrix<T> final_tokens;
  LayerNormCache<T> post_tokens;
  Matrix<T> final_regions;
  LayerNormCache<T> post_regions;
  VisibilityMask mask;
};

template <typename T>
struct EncodeOutput {
  TokenSequence<T> tokens;       // final patch stream after the output norm
  Matrix<T> region_embeddings;   // L × D, unnormalized
};

template <typename T>
EncodeOutput<T> encode(const Image& image, const std::vector<Region>& regions, const EncoderParams<T>& params,
                       EncodeCache<T>* cache = nullptr);

/// Accumulates ∂loss/∂params given ∂loss/∂region_embeddings.
template <typename T>
void encode_backward(const EncodeCache<T>& cache, const Matrix<T>& d_region_embeddings,
                     const EncoderParams<T>& params, EncoderParams<T>& grads);

}  // namespace rice
