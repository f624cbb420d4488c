// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Region cluster-discrimination losses over a large classifier: margin-scaled
// cosine logits, uniform partial negative sampling, the single-positive
// object loss, the multi-positive OCR loss, and an in-process simulation of
// a classifier sharded across W workers.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rice/tensor.hpp"

namespace rice {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct ClassifierState {
  Matrix<T> centers;  // K_total × D: object classes then OCR token classes
  T margin = T(0.3);
  T scale = T(64);
  std::size_t ocr_offset = 0;

  std::size_t num_classes() const { return centers.rows(); }
  std::size_t dim() const { return centers.cols(); }
  void validate() const;
};

struct NegativeSample {
  std::vector<std::size_t> ids;  // sorted
  double rho = 0.1;
  std::uint64_t seed = 0;
};

/// ⌊K·ρ⌋, tolerant of the representation error in ρ (0.57·100 → 57).
std::size_t negative_count(std::size_t k, double rho);

/// Uniform draw without replacement of ⌊K·ρ⌋ ids from [0, K) \ positives.
NegativeSample sample_negatives(std::size_t k, std::span<const std::size_t> positives, double rho,
                                std::uint64_t seed);

/// s·(cosθ − m) for a positive pair, s·cosθ otherwise. cosθ is clamped to
/// [−1, 1]. Both inputs must be unit length within 1e-6.
template <typename T>
T logit(std::span<const T> embedding, std::span<const T> center, bool is_positive, T margin, T scale);

template <typename T>
struct CenterGrad {
  std::size_t id;
  std::vector<T> grad;
};

template <typename T>
struct RegionLoss {
  T loss = 0;
  std::vector<T> d_embedding;
  std::vector<CenterGrad<T>> d_centers;  // touched rows only, ascending id
  std::vector<T> pos_cos;
  std::vector<T> neg_cos;
};

/// log(1 + exp(−logit_pos)) + log(1 + Σ_neg exp(logit_neg)).
template <typename T>
RegionLoss<T> object_loss(std::span<const T> embedding, std::size_t pos_id, const NegativeSample& negs,
                          const ClassifierState<T>& state);

/// log(1 + Σ_pos exp(−logit_p)) + log(1 + Σ_neg exp(logit_n)). Repeated
/// positive ids each contribute a term.
template <typename T>
RegionLoss<T> ocr_loss(std::span<const T> embedding, std::span<const std::size_t> pos_ids,
                       const NegativeSample& negs, const ClassifierState<T>& state);

// ---------------------------------------------------------------------------
// Sharded classifier

struct ShardLayout {
  std::size_t total = 0;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end)

  std::size_t shards() const { return ranges.size(); }
  std::size_t owner(std::size_t class_id) const;
};

ShardLayout shard_partition(std::size_t total, std::size_t shards);

template <typename T>
struct LossSample {
  std::span<const T> embedding;
  std::vector<std::size_t> positives;  // one id for object regions
  const NegativeSample* negatives = nullptr;
  T weight = T(1);
};

template <typename T>
struct BatchLoss {
  T loss = 0;                            // Σ weight_i · loss_i
  std::vector<T> sample_loss;            // unweighted per-sample losses
  std::vector<std::vector<T>> d_embedding;  // weighted, per sample
  Matrix<T> d_centers;                   // weighted, dense K_total × D
  std::vector<T> pos_cos;
  std::vector<T> neg_cos;
};

/// Every shard reduces the exponential terms of the classes it owns into a
/// (max, scaled-sum) partial; partials are combined in shard-id order, so the
/// evaluation order (default 0..W−1) never changes the result.
template <typename T>
BatchLoss<T> sharded_loss(std::span<const LossSample<T>> batch, const ShardLayout& layout,
                          const ClassifierState<T>& state,
                          std::span<const std::size_t> evaluation_order = {});

}  // namespace rice
