// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Spherical k-means (flat or two-level) and exact nearest-centroid label
// assignment.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rice/tensor.hpp"

namespace rice {

struct CoarseIndex {
  Matrix<float> centers;                          // K1 × D, unit rows
  std::vector<std::vector<std::uint32_t>> children;  // fine center ids per coarse center
};

struct CentroidTable {
  Matrix<float> centers;  // K × D, unit rows
  std::optional<CoarseIndex> level1;

  std::size_t k() const { return centers.rows(); }
  std::size_t dim() const { return centers.cols(); }

  /// Throws std::invalid_argument if rows are not unit length (1e-6) or the
  /// coarse index does not partition the fine centers.
  void validate() const;
};

struct KMeansOptions {
  std::size_t k = 1024;
  std::optional<std::size_t> coarse_k;
  int iters = 25;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  CentroidTable table;
  // Inertia (sum of squared distances on the unit sphere) after each Lloyd
  // iteration, one trace per Lloyd run: the coarse run first when present,
  // then one per fine bucket.
  std::vector<std::vector<double>> inertia_traces;
  double final_inertia = 0;
};

/// Rows of `features` are normalized before fitting. Throws
/// std::invalid_argument when n < K, K1 > K or a row has zero norm.
KMeansResult kmeans_fit(const Matrix<float>& features, const KMeansOptions& options);

/// Index of the nearest center (Euclidean on the normalized feature), ties to
/// the smallest index. Throws std::invalid_argument on a zero-norm feature.
std::size_t assign_label(std::span<const float> feature, const CentroidTable& table);

struct Assignment {
  std::vector<std::size_t> labels;
  std::vector<std::size_t> histogram;  // size K
  double inertia = 0;
};

Assignment assign_all(const Matrix<float>& features, const CentroidTable& table);

/// Fraction of points whose cluster's majority ground-truth class matches
/// their own ground-truth class.
double label_purity(std::span<const std::size_t> labels, std::span<const int> truth);

void write_centroids(const std::filesystem::path& path, const CentroidTable& table);
CentroidTable read_centroids(const std::filesystem::path& path);

}  // namespace rice
