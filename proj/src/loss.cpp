// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include "rice/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_set>

#include "rice/random.hpp"

namespace rice {

namespace {

constexpr double kUnitTolerance = 1e-6;

template <typename T>
void require_unit(std::span<const T> v, const char* what) {
  double n2 = 0;
  for (T x : v) n2 += static_cast<double>(x) * static_cast<double>(x);
  if (!(std::abs(std::sqrt(n2) - 1.0) <= kUnitTolerance))
    throw LossError(std::string(what) + " is not L2-normalized");
}

template <typename T>
T clamped_cos(std::span<const T> a, std::span<const T> b) {
  return std::clamp(dot(a, b), T(-1), T(1));
}

// log(1 + exp(z)) without overflow.
template <typename T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

// log(1 + Σ exp(x_j)) and the weights ∂/∂x_j = exp(x_j − result).
template <typename T>
T log1p_sum_exp(std::span<const T> x, std::vector<T>& weights) {
  weights.assign(x.size(), T(0));
  if (x.empty()) return T(0);
  T hi = 0;
  for (T v : x) hi = std::max(hi, v);
  T tail = 0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    weights[j] = std::exp(x[j] - hi);
    tail += weights[j];
  }
  T out;
  if (hi > 0) {
    const T sum = std::exp(-hi) + tail;
    out = hi + std::log(sum);
    for (auto& w : weights) w /= sum;
  } else {
    out = std::log1p(tail);
    for (auto& w : weights) w /= (T(1) + tail);
  }
  return out;
}

void check_disjoint(std::span<const std::size_t> pos, const NegativeSample& negs) {
  for (auto p : pos)
    if (std::binary_search(negs.ids.begin(), negs.ids.end(), p))
      throw LossError("positive class " + std::to_string(p) + " also sampled as a negative");
}

void check_ids(std::span<const std::size_t> ids, std::size_t k) {
  for (auto id : ids)
    if (id >= k) throw LossError("class id " + std::to_string(id) + " out of range");
}

// Shared by object_loss and ocr_loss once the positive term and its
// per-positive logit weights are known.
template <typename T>
RegionLoss<T> assemble(std::span<const T> emb, std::span<const std::size_t> pos_ids,
                       std::span<const T> pos_coeff, const std::vector<std::size_t>& neg_ids,
                       std::span<const T> neg_coeff, T loss, const ClassifierState<T>& state) {
  const std::size_t d = state.dim();
  RegionLoss<T> out;
  out.loss = loss;
  out.d_embedding.assign(d, T(0));
  std::vector<std::pair<std::size_t, T>> touched;
  for (std::size_t i = 0; i < pos_ids.size(); ++i) touched.emplace_back(pos_ids[i], pos_coeff[i]);
  for (std::size_t i = 0; i < neg_ids.size(); ++i) touched.emplace_back(neg_ids[i], neg_coeff[i]);
  // coeff = ∂loss/∂cosθ for that center
  for (const auto& [id, coeff] : touched) {
    auto c = state.centers.row(id);
    for (std::size_t k = 0; k < d; ++k) out.d_embedding[k] += coeff * c[k];
  }
  std::stable_sort(touched.begin(), touched.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [id, coeff] : touched) {
    if (out.d_centers.empty() || out.d_centers.back().id != id)
      out.d_centers.push_back({id, std::vector<T>(d, T(0))});
    auto& g = out.d_centers.back().grad;
    for (std::size_t k = 0; k < d; ++k) g[k] += coeff * emb[k];
  }
  return out;
}

}  // namespace

template <typename T>
void ClassifierState<T>::validate() const {
  if (!(margin >= T(0) && margin < T(1))) throw LossError("margin must lie in [0, 1)");
  if (!(scale > T(0))) throw LossError("scale must be positive");
  if (ocr_offset > centers.rows()) throw LossError("ocr_offset beyond the class count");
}

std::size_t negative_count(std::size_t k, double rho) {
  const double prod = static_cast<double>(k) * rho;
  return static_cast<std::size_t>(std::floor(prod * (1.0 + 1e-12)));
}

NegativeSample sample_negatives(std::size_t k, std::span<const std::size_t> positives, double rho,
                                std::uint64_t seed) {
  if (!(rho > 0.0 && rho <= 1.0)) throw LossError("rho must lie in (0, 1]");
  std::vector<std::size_t> pos(positives.begin(), positives.end());
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  check_ids(pos, k);
  const std::size_t count = negative_count(k, rho);
  if (count < 1) throw LossError("floor(K * rho) must be at least 1");
  if (pos.size() + count > k)
    throw LossError("cannot sample " + std::to_string(count) + " negatives from " + std::to_string(k) +
                    " classes with " + std::to_string(pos.size()) + " positives");
  Rng rng(seed);
  NegativeSample out;
  out.rho = rho;
  out.seed = seed;
  const std::size_t available = k - pos.size();
  if (count * 4 <= available) {
    // Sparse draw: rejection against positives and earlier picks.
    std::unordered_set<std::size_t> picked;
    picked.reserve(count * 2);
    while (out.ids.size() < count) {
      const auto id = static_cast<std::size_t>(rng.below(k));
      if (std::binary_search(pos.begin(), pos.end(), id)) continue;
      if (picked.insert(id).second) out.ids.push_back(id);
    }
  } else {
    std::vector<std::size_t> pool;
    pool.reserve(available);
    for (std::size_t id = 0, p = 0; id < k; ++id) {
      if (p < pos.size() && pos[p] == id) {
        ++p;
        continue;
      }
      pool.push_back(id);
    }
    for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    out.ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
  }
  std::sort(out.ids.begin(), out.ids.end());
  return out;
}

template <typename T>
T logit(std::span<const T> embedding, std::span<const T> center, bool is_positive, T margin, T scale) {
  if (embedding.size() != center.size()) throw ShapeError("logit: dimension mismatch");
  require_unit(embedding, "embedding");
  require_unit(center, "class center");
  const T c = clamped_cos(embedding, center);
  return is_positive ? scale * (c - margin) : scale * c;
}

template <typename T>
RegionLoss<T> object_loss(std::span<const T> embedding, std::size_t pos_id, const NegativeSample& negs,
                          const ClassifierState<T>& state) {
  state.validate();
  if (embedding.size() != state.dim()) throw ShapeError("object_loss: embedding dimension mismatch");
  require_unit(embedding, "embedding");
  const std::size_t pos[1] = {pos_id};
  check_ids(pos, state.num_classes());
  check_ids(negs.ids, state.num_classes());
  check_disjoint(pos, negs);

  const T s = state.scale, m = state.margin;
  const T pos_cos = clamped_cos<T>(embedding, state.centers.row(pos_id));
  const T z = -s * (pos_cos - m);
  // ∂softplus(z)/∂z = sigmoid(z)
  const T pos_coeff = -s / (T(1) + std::exp(-z));

  std::vector<T> neg_logits, neg_cos;
  for (auto id : negs.ids) {
    neg_cos.push_back(clamped_cos<T>(embedding, state.centers.row(id)));
    neg_logits.push_back(s * neg_cos.back());
  }
  std::vector<T> w;
  const T neg_term = log1p_sum_exp<T>(neg_logits, w);
  for (auto& x : w) x *= s;

  const T pc[1] = {pos_coeff};
  auto out = assemble<T>(embedding, pos, pc, negs.ids, w, softplus(z) + neg_term, state);
  out.pos_cos = {pos_cos};
  out.neg_cos = std::move(neg_cos);
  return out;
}

template <typename T>
RegionLoss<T> ocr_loss(std::span<const T> embedding, std::span<const std::size_t> pos_ids,
                       const NegativeSample& negs, const ClassifierState<T>& state) {
  state.validate();
  if (pos_ids.empty()) throw LossError("ocr_loss: no positive classes");
  if (embedding.size() != state.dim()) throw ShapeError("ocr_loss: embedding dimension mismatch");
  require_unit(embedding, "embedding");
  check_ids(pos_ids, state.num_classes());
  check_ids(negs.ids, state.num_classes());
  check_disjoint(pos_ids, negs);

  const T s = state.scale, m = state.margin;
  std::vector<T> pos_logits, pos_cos;
  for (auto id : pos_ids) {
    pos_cos.push_back(clamped_cos<T>(embedding, state.centers.row(id)));
    pos_logits.push_back(-s * (pos_cos.back() - m));
  }
  std::vector<T> wp;
  const T pos_term = log1p_sum_exp<T>(pos_logits, wp);
  for (auto& x : wp) x *= -s;

  std::vector<T> neg_logits, neg_cos;
  for (auto id : negs.ids) {
    neg_cos.push_back(clamped_cos<T>(embedding, state.centers.row(id)));
    neg_logits.push_back(s * neg_cos.back());
  }
  std::vector<T> wn;
  const T neg_term = log1p_sum_exp<T>(neg_logits, wn);
  for (auto& x : wn) x *= s;

  auto out = assemble<T>(embedding, pos_ids, wp, negs.ids, wn, pos_term + neg_term, state);
  out.pos_cos = std::move(pos_cos);
  out.neg_cos = std::move(neg_cos);
  return out;
}

// ---------------------------------------------------------------------------
// Sharding

std::size_t ShardLayout::owner(std::size_t class_id) const {
  if (class_id >= total) throw LossError("class id outside the shard layout");
  auto it = std::upper_bound(ranges.begin(), ranges.end(), class_id,
                             [](std::size_t id, const auto& r) { return id < r.first; });
  return static_cast<std::size_t>(it - ranges.begin()) - 1;
}

ShardLayout shard_partition(std::size_t total, std::size_t shards) {
  if (shards == 0) throw LossError("shard count must be >= 1");
  if (shards > total) throw LossError("more shards than classes");
  ShardLayout layout;
  layout.total = total;
  const std::size_t base = total / shards, extra = total % shards;
  std::size_t begin = 0;
  for (std::size_t w = 0; w < shards; ++w) {
    const std::size_t size = base + (w < extra ? 1 : 0);
    layout.ranges.emplace_back(begin, begin + size);
    begin += size;
  }
  return layout;
}

namespace {

// Running (max, Σ exp(x − max)) over one shard's terms.
template <typename T>
struct Partial {
  T hi = -std::numeric_limits<T>::infinity();
  T sum = 0;

  void add(T x) {
    if (x > hi) {
      sum = sum * std::exp(hi - x) + T(1);
      hi = x;
    } else {
      sum += std::exp(x - hi);
    }
  }
};

// log(1 + Σ_w sum_w·exp(hi_w)), merged in shard order.
template <typename T>
T merge_log1p(const std::vector<Partial<T>>& parts) {
  T hi = 0;
  for (const auto& p : parts)
    if (p.sum > 0) hi = std::max(hi, p.hi);
  T total = 0;
  for (const auto& p : parts)
    if (p.sum > 0) total += p.sum * std::exp(p.hi - hi);
  if (hi > 0) return hi + std::log(std::exp(-hi) + total);
  return std::log1p(total);
}

}  // namespace

template <typename T>
BatchLoss<T> sharded_loss(std::span<const LossSample<T>> batch, const ShardLayout& layout,
                          const ClassifierState<T>& state, std::span<const std::size_t> evaluation_order) {
  state.validate();
  const std::size_t k = state.num_classes(), d = state.dim(), w = layout.shards();
  if (layout.total != k) throw LossError("shard layout does not match the classifier");
  std::vector<std::size_t> order(w);
  std::iota(order.begin(), order.end(), 0);
  if (!evaluation_order.empty()) {
    std::vector<std::size_t> sorted(evaluation_order.begin(), evaluation_order.end());
    std::sort(sorted.begin(), sorted.end());
    if (sorted != order) throw LossError("evaluation order must be a permutation of the shards");
    order.assign(evaluation_order.begin(), evaluation_order.end());
  }

  const T s = state.scale, m = state.margin;
  BatchLoss<T> out;
  out.d_centers = Matrix<T>(k, d);
  out.sample_loss.resize(batch.size());
  out.d_embedding.assign(batch.size(), std::vector<T>(d, T(0)));

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& smp = batch[i];
    if (!smp.negatives) throw LossError("sample without a negative set");
    if (smp.positives.empty()) throw LossError("sample without positive classes");
    if (smp.embedding.size() != d) throw ShapeError("sharded_loss: embedding dimension mismatch");
    require_unit(smp.embedding, "embedding");
    check_ids(smp.positives, k);
    check_ids(smp.negatives->ids, k);
    check_disjoint(smp.positives, *smp.negatives);
    const auto& negs = smp.negatives->ids;

    // Per-shard partials; each shard touches only the ids it owns.
    std::vector<Partial<T>> pos_parts(w), neg_parts(w);
    std::vector<T> pos_logit(smp.positives.size()), neg_logit(negs.size());
    std::vector<T> pos_cos(smp.positives.size()), neg_cos(negs.size());
    for (auto shard : order) {
      const auto [lo, hi] = layout.ranges[shard];
      for (std::size_t j = 0; j < smp.positives.size(); ++j) {
        const auto id = smp.positives[j];
        if (id < lo || id >= hi) continue;
        pos_cos[j] = clamped_cos<T>(smp.embedding, state.centers.row(id));
        pos_logit[j] = -s * (pos_cos[j] - m);
      }
      for (std::size_t j = 0; j < negs.size(); ++j) {
        const auto id = negs[j];
        if (id < lo || id >= hi) continue;
        neg_cos[j] = clamped_cos<T>(smp.embedding, state.centers.row(id));
        neg_logit[j] = s * neg_cos[j];
      }
    }
    // Accumulate in a fixed id order within each shard, independent of the
    // evaluation order above.
    for (std::size_t shard = 0; shard < w; ++shard) {
      const auto [lo, hi] = layout.ranges[shard];
      for (std::size_t j = 0; j < smp.positives.size(); ++j)
        if (smp.positives[j] >= lo && smp.positives[j] < hi) pos_parts[shard].add(pos_logit[j]);
      for (std::size_t j = 0; j < negs.size(); ++j)
        if (negs[j] >= lo && negs[j] < hi) neg_parts[shard].add(neg_logit[j]);
    }
    out.pos_cos.insert(out.pos_cos.end(), pos_cos.begin(), pos_cos.end());
    out.neg_cos.insert(out.neg_cos.end(), neg_cos.begin(), neg_cos.end());
    const T pos_lse = merge_log1p(pos_parts);
    const T neg_lse = merge_log1p(neg_parts);
    out.sample_loss[i] = pos_lse + neg_lse;
    out.loss += smp.weight * out.sample_loss[i];

    // Gradients: every shard scales its own terms by the gathered totals and
    // contributes a partial embedding gradient, summed in shard order.
    std::vector<std::vector<T>> emb_parts(w, std::vector<T>(d, T(0)));
    for (auto shard : order) {
      const auto [lo, hi] = layout.ranges[shard];
      auto& ep = emb_parts[shard];
      auto touch = [&](std::size_t id, T coeff) {
        auto c = state.centers.row(id);
        auto g = out.d_centers.row(id);
        for (std::size_t q = 0; q < d; ++q) {
          ep[q] += coeff * c[q];
          g[q] += coeff * smp.embedding[q];
        }
      };
      for (std::size_t j = 0; j < smp.positives.size(); ++j) {
        const auto id = smp.positives[j];
        if (id >= lo && id < hi) touch(id, -s * smp.weight * std::exp(pos_logit[j] - pos_lse));
      }
      for (std::size_t j = 0; j < negs.size(); ++j) {
        const auto id = negs[j];
        if (id >= lo && id < hi) touch(id, s * smp.weight * std::exp(neg_logit[j] - neg_lse));
      }
    }
    for (std::size_t shard = 0; shard < w; ++shard)
      for (std::size_t q = 0; q < d; ++q) out.d_embedding[i][q] += emb_parts[shard][q];
  }
  return out;
}

#define RICE_INSTANTIATE(T)                                                                           \
  template struct ClassifierState<T>;                                                                 \
  template T logit<T>(std::span<const T>, std::span<const T>, bool, T, T);                           \
  template RegionLoss<T> object_loss<T>(std::span<const T>, std::size_t, const NegativeSample&,       \
                                        const ClassifierState<T>&);                                   \
  template RegionLoss<T> ocr_loss<T>(std::span<const T>, std::span<const std::size_t>,               \
                                     const NegativeSample&, const ClassifierState<T>&);               \
  template BatchLoss<T> sharded_loss<T>(std::span<const LossSample<T>>, const ShardLayout&,           \
                                        const ClassifierState<T>&, std::span<const std::size_t>);

RICE_INSTANTIATE(float)
RICE_INSTANTIATE(double)

#undef RICE_INSTANTIATE

}  // namespace rice
