// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include "rice/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

#include "rice/binary_io.hpp"
#include "rice/random.hpp"

namespace rice {

namespace {

using Points = Matrix<double>;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

Points normalized_copy(const Matrix<float>& f) {
  Points p = f.cast<double>();
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    const double n = l2_norm<double>(r);
    if (!(n > 0) || !std::isfinite(n))
      throw std::invalid_argument("kmeans: feature row " + std::to_string(i) + " has zero or non-finite norm");
    for (auto& x : r) x /= n;
  }
  return p;
}

struct Lloyd {
  Points centers;
  std::vector<std::size_t> assign;
  std::vector<double> trace;
};

std::size_t nearest(std::span<const double> x, const Points& centers, double* dist = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.rows(); ++k) {
    const double d = sq_dist(x, centers.row(k));
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  if (dist) *dist = bd;
  return best;
}

// Greedy k-means++: each step draws several D²-weighted candidates and keeps
// the one that lowers the potential the most.
Points plus_plus_seed(const Points& pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.rows(), d = pts.cols();
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  Points centers(k, d);
  std::size_t first = rng.below(n);
  std::copy_n(pts.row(first).begin(), d, centers.row(0).begin());
  std::vector<double> mind(n), cumulative(n), best_d(n), cand_d(n);
  for (std::size_t i = 0; i < n; ++i) mind[i] = sq_dist(pts.row(i), centers.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) cumulative[i] = total += mind[i];
    std::size_t pick = n;
    double best_potential = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      std::size_t cand;
      if (total > 0) {
        const double target = rng.uniform() * total;
        cand = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), target) -
                                        cumulative.begin());
        cand = std::min(cand, n - 1);
        while (mind[cand] == 0 && cand > 0) --cand;
      } else {
        cand = rng.below(n);
      }
      double potential = 0;
      for (std::size_t i = 0; i < n; ++i) {
        cand_d[i] = std::min(mind[i], sq_dist(pts.row(i), pts.row(cand)));
        potential += cand_d[i];
      }
      if (potential < best_potential) {
        best_potential = potential;
        pick = cand;
        best_d.swap(cand_d);
      }
    }
    mind.swap(best_d);
    std::copy_n(pts.row(pick).begin(), d, centers.row(c).begin());
  }
  return centers;
}

// Spherical Lloyd iterations over the points selected by `subset`.
Lloyd run_lloyd(const Points& pts, std::size_t k, int iters, std::uint64_t seed) {
  const std::size_t n = pts.rows(), d = pts.cols();
  Rng rng(seed);
  Lloyd st;
  st.centers = plus_plus_seed(pts, k, rng);
  st.assign.assign(n, 0);
  std::vector<double> dist(n);
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) st.assign[i] = nearest(pts.row(i), st.centers, &dist[i]);

    // Empty clusters take the point farthest from its current center.
    std::vector<std::size_t> counts(k, 0);
    for (auto a : st.assign) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[st.assign[i]] <= 1) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      if (far == n) break;
      --counts[st.assign[far]];
      st.assign[far] = c;
      counts[c] = 1;
      dist[far] = 0;
    }

    // Normalized means; fixed point order per cluster.
    Points sums(k, d);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(st.assign[i]);
      auto p = pts.row(i);
      for (std::size_t j = 0; j < d; ++j) s[j] += p[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      auto s = sums.row(c);
      const double nrm = l2_norm<double>(s);
      if (nrm > 0) {
        auto dst = st.centers.row(c);
        for (std::size_t j = 0; j < d; ++j) dst[j] = s[j] / nrm;
      }
    }

    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) inertia += sq_dist(pts.row(i), st.centers.row(st.assign[i]));
    if (!st.trace.empty() && inertia > st.trace.back() + 1e-12 * (1.0 + st.trace.back()))
      throw std::logic_error("kmeans: inertia increased during a Lloyd iteration");
    st.trace.push_back(inertia);
  }
  if (iters <= 0)
    for (std::size_t i = 0; i < n; ++i) st.assign[i] = nearest(pts.row(i), st.centers);
  return st;
}

// Splits k centers over buckets proportionally to their sizes (largest
// remainder), at least one per bucket and never more than its point count.
std::vector<std::size_t> allocate(const std::vector<std::size_t>& sizes, std::size_t k) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  const std::size_t b = sizes.size();
  std::vector<std::size_t> quota(b, 1);
  std::size_t used = b;
  std::vector<std::pair<double, std::size_t>> rem;
  for (std::size_t i = 0; i < b; ++i) {
    const double share = static_cast<double>(sizes[i]) * static_cast<double>(k) / static_cast<double>(n);
    const auto whole = std::clamp<std::size_t>(static_cast<std::size_t>(share), 1, sizes[i]);
    used += whole - 1;
    quota[i] = whole;
    rem.emplace_back(share - static_cast<double>(whole), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& c) { return a.first > c.first; });
  while (used < k) {
    bool progressed = false;
    for (auto& [r, i] : rem) {
      if (used == k) break;
      if (quota[i] < sizes[i]) {
        ++quota[i];
        ++used;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  while (used > k) {
    for (auto it = rem.rbegin(); it != rem.rend() && used > k; ++it) {
      if (quota[it->second] > 1) {
        --quota[it->second];
        --used;
      }
    }
  }
  return quota;
}

Matrix<float> to_float(const Points& p) { return p.cast<float>(); }

}  // namespace

void CentroidTable::validate() const {
  if (centers.rows() == 0) throw std::invalid_argument("centroid table is empty");
  for (std::size_t k = 0; k < centers.rows(); ++k) {
    double n2 = 0;
    for (float x : centers.row(k)) n2 += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
      throw std::invalid_argument("centroid row " + std::to_string(k) + " is not unit length");
  }
  if (level1) {
    std::vector<int> owner(centers.rows(), 0);
    for (const auto& ch : level1->children)
      for (auto id : ch) {
        if (id >= centers.rows()) throw std::invalid_argument("coarse child id out of range");
        ++owner[id];
      }
    for (int o : owner)
      if (o != 1) throw std::invalid_argument("coarse index does not partition fine centers");
  }
}

KMeansResult kmeans_fit(const Matrix<float>& features, const KMeansOptions& opt) {
  const std::size_t n = features.rows();
  if (opt.k == 0) throw std::invalid_argument("kmeans: K must be >= 1");
  if (n < opt.k)
    throw std::invalid_argument("kmeans: need at least K=" + std::to_string(opt.k) + " points, got " +
                                std::to_string(n));
  if (opt.coarse_k && (*opt.coarse_k == 0 || *opt.coarse_k > opt.k))
    throw std::invalid_argument("kmeans: coarse K1 must be in [1, K]");
  const Points pts = normalized_copy(features);
  const std::size_t d = pts.cols();

  KMeansResult res;
  if (!opt.coarse_k) {
    auto st = run_lloyd(pts, opt.k, opt.iters, derive_seed(opt.seed, {0}));
    res.table.centers = to_float(st.centers);
    res.inertia_traces.push_back(std::move(st.trace));
  } else {
    const std::size_t k1 = *opt.coarse_k;
    auto coarse = run_lloyd(pts, k1, opt.iters, derive_seed(opt.seed, {0}));
    res.inertia_traces.push_back(coarse.trace);
    std::vector<std::vector<std::size_t>> members(k1);
    for (std::size_t i = 0; i < n; ++i) members[coarse.assign[i]].push_back(i);
    std::vector<std::size_t> sizes;
    for (auto& m : members) sizes.push_back(m.size());
    const auto quota = allocate(sizes, opt.k);

    Points fine(opt.k, d);
    CoarseIndex index;
    index.centers = to_float(coarse.centers);
    index.children.resize(k1);
    std::size_t next = 0;
    for (std::size_t b = 0; b < k1; ++b) {
      Points sub(members[b].size(), d);
      for (std::size_t i = 0; i < members[b].size(); ++i)
        std::copy_n(pts.row(members[b][i]).begin(), d, sub.row(i).begin());
      auto st = run_lloyd(sub, quota[b], opt.iters, derive_seed(opt.seed, {1, b}));
      for (std::size_t c = 0; c < quota[b]; ++c) {
        std::copy_n(st.centers.row(c).begin(), d, fine.row(next).begin());
        index.children[b].push_back(static_cast<std::uint32_t>(next));
        ++next;
      }
      res.inertia_traces.push_back(std::move(st.trace));
    }
    res.table.centers = to_float(fine);
    res.table.level1 = std::move(index);
  }
  normalize_rows(res.table.centers);
  res.final_inertia = assign_all(features, res.table).inertia;
  return res;
}

std::size_t assign_label(std::span<const float> feature, const CentroidTable& table) {
  if (table.k() == 0) throw std::invalid_argument("assign_label: empty centroid table");
  if (feature.size() != table.dim()) throw ShapeError("assign_label: feature dimension mismatch");
  double n2 = 0;
  for (float x : feature) n2 += static_cast<double>(x) * x;
  const double n = std::sqrt(n2);
  if (!(n > 0) || !std::isfinite(n)) throw std::invalid_argument("assign_label: zero-norm feature");
  std::vector<double> f(feature.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = feature[i] / n;
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < table.k(); ++k) {
    double acc = 0;
    auto c = table.centers.row(k);
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double diff = f[i] - c[i];
      acc += diff * diff;
    }
    if (acc < bd) {
      bd = acc;
      best = k;
    }
  }
  return best;
}

Assignment assign_all(const Matrix<float>& features, const CentroidTable& table) {
  Assignment out;
  out.histogram.assign(table.k(), 0);
  out.labels.reserve(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto label = assign_label(features.row(i), table);
    out.labels.push_back(label);
    ++out.histogram[label];
    double n2 = 0;
    for (float x : features.row(i)) n2 += static_cast<double>(x) * x;
    const double n = std::sqrt(n2);
    double acc = 0;
    auto c = table.centers.row(label);
    for (std::size_t j = 0; j < features.cols(); ++j) {
      const double diff = features(i, j) / n - c[j];
      acc += diff * diff;
    }
    out.inertia += acc;
  }
  return out;
}

double label_purity(std::span<const std::size_t> labels, std::span<const int> truth) {
  if (labels.size() != truth.size()) throw std::invalid_argument("label_purity: length mismatch");
  if (labels.empty()) return 1.0;
  std::map<std::size_t, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < labels.size(); ++i) ++table[labels[i]][truth[i]];
  std::size_t agree = 0;
  for (const auto& [label, counts] : table) {
    std::size_t best = 0;
    for (const auto& [t, c] : counts) best = std::max(best, c);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(labels.size());
}

void write_centroids(const std::filesystem::path& path, const CentroidTable& table) {
  BinaryWriter w(path);
  w.magic("RICC");
  w.u32(static_cast<std::uint32_t>(table.k()));
  w.u32(static_cast<std::uint32_t>(table.dim()));
  w.f32s(table.centers.storage());
  if (table.level1) {
    const auto& l1 = *table.level1;
    w.magic("RICH");
    w.u32(static_cast<std::uint32_t>(l1.centers.rows()));
    w.u32(static_cast<std::uint32_t>(l1.centers.cols()));
    w.f32s(l1.centers.storage());
    for (const auto& ch : l1.children) {
      w.u32(static_cast<std::uint32_t>(ch.size()));
      for (auto id : ch) w.u32(id);
    }
  }
  w.close();
}

CentroidTable read_centroids(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("RICC");
  CentroidTable t;
  const auto k = r.u32();
  const auto d = r.u32();
  t.centers = Matrix<float>(k, d);
  r.f32s(t.centers.storage());
  if (r.try_magic("RICH")) {
    CoarseIndex l1;
    const auto k1 = r.u32();
    const auto d1 = r.u32();
    if (d1 != d) throw FormatError(path.string() + ": coarse block dimension mismatch");
    l1.centers = Matrix<float>(k1, d1);
    r.f32s(l1.centers.storage());
    l1.children.resize(k1);
    for (auto& ch : l1.children) {
      const auto cnt = r.u32();
      if (cnt > k) throw FormatError(path.string() + ": bad coarse child count");
      for (std::uint32_t i = 0; i < cnt; ++i) ch.push_back(r.u32());
    }
    t.level1 = std::move(l1);
  }
  r.expect_end();
  return t;
}

}  // namespace rice
