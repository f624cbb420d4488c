// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>

#include "helpers.hpp"
#include "rice/gradcheck.hpp"
#include "rice/loss.hpp"

using namespace rice;

namespace {

std::vector<double> unit_vector(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.normal();
  const double n = l2_norm<double>(v);
  for (auto& x : v) x /= n;
  return v;
}

ClassifierState<double> random_state(std::size_t k, std::size_t d, Rng& rng, double m = 0.3, double s = 64) {
  ClassifierState<double> st;
  st.centers = testing::random_matrix<double>(k, d, rng);
  normalize_rows(st.centers);
  st.margin = m;
  st.scale = s;
  return st;
}

std::vector<std::vector<double>> rows_of(const Matrix<double>& m, std::span<const std::size_t> ids) {
  std::vector<std::vector<double>> out;
  for (auto id : ids) out.emplace_back(m.row(id).begin(), m.row(id).end());
  return out;
}

NegativeSample fixed_negatives(std::vector<std::size_t> ids) {
  NegativeSample n;
  n.ids = std::move(ids);
  std::sort(n.ids.begin(), n.ids.end());
  return n;
}

}  // namespace

TEST_SUITE("loss") {

TEST_CASE("logit examples") {
  std::vector<double> a{1, 0, 0}, b{0, 1, 0}, c{-1, 0, 0};
  CHECK(logit<double>(a, a, true, 0.3, 64) == doctest::Approx(44.8).epsilon(1e-12));
  CHECK(logit<double>(a, b, false, 0.3, 64) == 0.0);
  CHECK(logit<double>(a, c, true, 0.0, 1.0) == -1.0);
  std::vector<double> bad{2, 0, 0};
  CHECK_THROWS_AS(logit<double>(bad, a, true, 0.3, 64), LossError);
}

TEST_CASE("cosine is clamped to [-1, 1]") {
  // Within the normalization tolerance, a·a may exceed 1.
  std::vector<double> a{1.0 + 4e-7, 0, 0};
  CHECK(logit<double>(a, a, false, 0.0, 1.0) == 1.0);
}

TEST_CASE("negative count") {
  CHECK(negative_count(1000000, 0.1) == 100000);
  CHECK(negative_count(100, 0.57) == 57);
  CHECK(negative_count(10, 0.1) == 1);
  CHECK(sample_negatives(1000000, {}, 0.1, 1).ids.size() == 100000);
}

TEST_CASE("exhaustive sampling returns every id") {
  const auto s = sample_negatives(37, {}, 1.0, 4);
  std::vector<std::size_t> all(37);
  std::iota(all.begin(), all.end(), 0);
  CHECK(s.ids == all);
}

TEST_CASE("infeasible samples are rejected") {
  CHECK_THROWS_AS(sample_negatives(5, {}, 0.1, 0), LossError);  // floor(0.5) = 0
  const std::size_t pos[] = {0, 1};
  CHECK_THROWS_AS(sample_negatives(10, pos, 0.9, 0), LossError);
  CHECK_THROWS_AS(sample_negatives(10, {}, 0.0, 0), LossError);
  CHECK_THROWS_AS(sample_negatives(10, {}, 1.5, 0), LossError);
}

TEST_CASE("negative sampler is uniform and excludes the positive") {
  const std::size_t k = 100, pos[] = {3};
  std::vector<double> counts(k, 0.0);
  for (std::uint64_t t = 0; t < 10000; ++t) {
    const auto s = sample_negatives(k, pos, 0.1, derive_seed(99, {t}));
    REQUIRE(s.ids.size() == 10);
    CHECK(std::is_sorted(s.ids.begin(), s.ids.end()));
    CHECK(std::adjacent_find(s.ids.begin(), s.ids.end()) == s.ids.end());
    for (auto id : s.ids) counts[id] += 1;
  }
  CHECK(counts[3] == 0.0);
  const double expected = 10000.0 * 10 / 99;
  double chi2 = 0;
  for (std::size_t i = 0; i < k; ++i)
    if (i != 3) chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(98), chi2));
  CHECK(p > 0.01);
}

TEST_CASE("sampler is deterministic per seed") {
  const std::size_t pos[] = {1, 7};
  CHECK(sample_negatives(500, pos, 0.2, 12).ids == sample_negatives(500, pos, 0.2, 12).ids);
  CHECK(sample_negatives(500, pos, 0.2, 12).ids != sample_negatives(500, pos, 0.2, 13).ids);
}

TEST_CASE("closed-form object loss") {
  ClassifierState<double> st;
  st.centers = Matrix<double>(2, 3);
  st.centers(0, 0) = 1;
  st.centers(1, 1) = 1;
  st.margin = 0;
  st.scale = 1;
  std::vector<double> e{1, 0, 0};
  const auto r = object_loss<double>(e, 0, NegativeSample{}, st);
  CHECK(std::abs(r.loss - std::log1p(std::exp(-1.0))) <= 1e-9);
  CHECK(r.loss == doctest::Approx(0.3133).epsilon(1e-4));
}

TEST_CASE("object loss matches the direct evaluation") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto st = random_state(20, 8, rng, 0.3, 8.0);
    const auto e = unit_vector(8, rng);
    const auto negs = sample_negatives(20, std::vector<std::size_t>{4}, 0.25, static_cast<std::uint64_t>(t));
    const auto r = object_loss<double>(e, 4, negs, st);
    const auto ref = reference_object_loss(e, st.centers.row(4), rows_of(st.centers, negs.ids), 0.3, 8.0);
    CHECK(std::abs(r.loss - static_cast<double>(ref)) <= 1e-10);
  }
}

TEST_CASE("object loss rejects a positive among the negatives") {
  Rng rng(6);
  auto st = random_state(10, 4, rng);
  const auto e = unit_vector(4, rng);
  CHECK_THROWS_AS(object_loss<double>(e, 2, fixed_negatives({1, 2}), st), LossError);
}

TEST_CASE("object loss decreases with the positive cosine") {
  // The negative center is orthogonal to the plane the embedding sweeps, so
  // only the positive cosine changes.
  ClassifierState<double> st;
  st.centers = Matrix<double>(2, 3);
  st.centers(0, 0) = 1;
  st.centers(1, 2) = 1;
  st.scale = 4;
  const auto negs = fixed_negatives({1});
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 20; ++i) {
    const double c = -1.0 + i * 0.1;
    const std::vector<double> e{c, std::sqrt(std::max(0.0, 1 - c * c)), 0};
    const auto r = object_loss<double>(e, 0, negs, st);
    CHECK(r.loss < prev);
    prev = r.loss;
  }
}

TEST_CASE("loss derivatives have the expected signs") {
  // The center gradient of a logit is (dL/dcos) times the embedding, so its
  // projection on the embedding is the derivative in the cosine.
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    auto st = random_state(12, 6, rng, 0.3, 1 + 15 * rng.uniform());
    const auto e = unit_vector(6, rng);
    const auto negs = fixed_negatives({1, 5, 9});
    const std::vector<std::size_t> pos{0, 3};
    for (const auto& r : {object_loss<double>(e, 0, negs, st), ocr_loss<double>(e, pos, negs, st)})
      for (const auto& cg : r.d_centers) {
        const double proj = dot<double>(cg.grad, e);
        if (cg.id == 0 || cg.id == 3)
          CHECK(proj < 0);
        else
          CHECK(proj > 0);
      }
  }
}

TEST_CASE("only touched centers receive gradients") {
  Rng rng(8);
  auto st = random_state(30, 8, rng);
  const auto e = unit_vector(8, rng);
  const auto negs = fixed_negatives({2, 11, 25});
  const auto r = object_loss<double>(e, 7, negs, st);
  std::vector<std::size_t> ids;
  for (const auto& g : r.d_centers) ids.push_back(g.id);
  CHECK(ids == std::vector<std::size_t>{2, 7, 11, 25});
}

TEST_CASE("losses are finite and non-negative") {
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    auto st = random_state(50, 16, rng, 0.3, 64);
    const auto e = unit_vector(16, rng);
    const auto negs = sample_negatives(50, std::vector<std::size_t>{0, 1}, 0.5, static_cast<std::uint64_t>(t));
    const auto a = object_loss<double>(e, 0, negs, st);
    const std::size_t pos[] = {0, 1};
    const auto b = ocr_loss<double>(e, pos, negs, st);
    CHECK(std::isfinite(a.loss));
    CHECK(a.loss >= 0);
    CHECK(std::isfinite(b.loss));
    CHECK(b.loss >= 0);
    // f32 at the extreme scale as well.
    const auto sf = ClassifierState<float>{st.centers.cast<float>(), 0.3f, 64.0f, 0};
    std::vector<float> ef(e.begin(), e.end());
    const float nf = l2_norm<float>(ef);
    for (auto& x : ef) x /= nf;
    const auto c = object_loss<float>(ef, 0, negs, sf);
    CHECK(std::isfinite(c.loss));
    CHECK(c.loss >= 0);
  }
}

TEST_CASE("ocr loss with one positive is the object loss") {
  Rng rng(10);
  for (int t = 0; t < 1000; ++t) {
    auto st = random_state(40, 8, rng, rng.uniform(0, 0.9), 1 + 63 * rng.uniform());
    const auto e = unit_vector(8, rng);
    const std::size_t pos = rng.below(40);
    const auto negs = sample_negatives(40, std::vector<std::size_t>{pos}, 0.2, static_cast<std::uint64_t>(t));
    const auto a = object_loss<double>(e, pos, negs, st);
    const auto b = ocr_loss<double>(e, std::span<const std::size_t>(&pos, 1), negs, st);
    CHECK(std::abs(a.loss - b.loss) <= 1e-12);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(a.d_embedding[j] - b.d_embedding[j]) <= 1e-12);
  }
}

TEST_CASE("ocr loss matches the direct evaluation") {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    auto st = random_state(30, 8, rng, 0.3, 8);
    const auto e = unit_vector(8, rng);
    std::vector<std::size_t> pos{3, 9, 14, 20};
    const auto negs = sample_negatives(30, pos, 8.0 / 30, static_cast<std::uint64_t>(t));
    REQUIRE(negs.ids.size() == 8);
    const auto r = ocr_loss<double>(e, pos, negs, st);
    const auto ref = reference_ocr_loss(e, rows_of(st.centers, pos), rows_of(st.centers, negs.ids), 0.3, 8);
    CHECK(std::abs(r.loss - static_cast<double>(ref)) <= 1e-10);
  }
}

TEST_CASE("duplicate positives count twice") {
  Rng rng(12);
  auto st = random_state(10, 4, rng, 0.3, 4);
  const auto e = unit_vector(4, rng);
  const auto negs = fixed_negatives({0});
  const std::vector<std::size_t> dup{5, 5}, once{5};
  const auto a = ocr_loss<double>(e, dup, negs, st);
  const auto ref = reference_ocr_loss(e, rows_of(st.centers, dup), rows_of(st.centers, negs.ids), 0.3, 4);
  CHECK(std::abs(a.loss - static_cast<double>(ref)) <= 1e-12);
  CHECK(a.loss > ocr_loss<double>(e, once, negs, st).loss);
}

TEST_CASE("ocr loss errors") {
  Rng rng(13);
  auto st = random_state(10, 4, rng);
  const auto e = unit_vector(4, rng);
  CHECK_THROWS_AS(ocr_loss<double>(e, {}, fixed_negatives({1}), st), LossError);
  const std::vector<std::size_t> pos{1, 2};
  CHECK_THROWS_AS(ocr_loss<double>(e, pos, fixed_negatives({2}), st), LossError);
}

TEST_CASE("loss gradients match finite differences") {
  CHECK(grad_check("object_loss", 20, 1) <= 1e-6);
  CHECK(grad_check("ocr_loss", 20, 2) <= 1e-6);
  CHECK(grad_check("end_to_end", 2, 3) <= 1e-5);
}

TEST_CASE("a flipped margin is caught by the checker") {
  CHECK(grad_check("object_loss", 5, 1, Fault::MarginSign) > 1e-6);
  CHECK(grad_check("ocr_loss", 5, 2, Fault::MarginSign) > 1e-6);
  CHECK_THROWS_AS(grad_check("nope", 1, 1), std::invalid_argument);
}

TEST_CASE("shard partition examples") {
  using R = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(shard_partition(10, 1).ranges == R{{0, 10}});
  CHECK(shard_partition(10, 3).ranges == R{{0, 4}, {4, 7}, {7, 10}});
  const auto l = shard_partition(1024, 4);
  for (std::size_t w = 0; w < 4; ++w) CHECK(l.ranges[w].second - l.ranges[w].first == 256);
  CHECK(l.owner(255) == 0);
  CHECK(l.owner(256) == 1);
  CHECK_THROWS_AS(shard_partition(10, 0), LossError);
  CHECK_THROWS_AS(shard_partition(3, 4), LossError);
}

TEST_CASE("shard partition covers the classes with near-equal sizes") {
  for (std::size_t k = 1; k < 60; ++k)
    for (std::size_t w = 1; w <= k; ++w) {
      const auto l = shard_partition(k, w);
      REQUIRE(l.shards() == w);
      CHECK(l.ranges.front().first == 0);
      CHECK(l.ranges.back().second == k);
      std::size_t lo = k, hi = 0;
      for (std::size_t i = 0; i < w; ++i) {
        if (i > 0) CHECK(l.ranges[i].first == l.ranges[i - 1].second);
        lo = std::min(lo, l.ranges[i].second - l.ranges[i].first);
        hi = std::max(hi, l.ranges[i].second - l.ranges[i].first);
      }
      CHECK(hi - lo <= 1);
    }
}

namespace {

struct RandomBatch {
  ClassifierState<double> state;
  std::vector<std::vector<double>> embeddings;
  std::vector<NegativeSample> negatives;
  std::vector<LossSample<double>> samples;
};

RandomBatch random_batch(Rng& rng, std::uint64_t seed) {
  RandomBatch b;
  b.state = random_state(64, 8, rng, 0.3, 16);
  b.state.ocr_offset = 40;
  const std::size_t n = 6;
  b.embeddings.resize(n);
  b.negatives.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.embeddings[i] = unit_vector(8, rng);
    std::vector<std::size_t> pos;
    if (i % 2 == 0)
      pos.push_back(rng.below(40));
    else
      for (int j = 0; j < 3; ++j) pos.push_back(40 + rng.below(24));
    b.negatives[i] = sample_negatives(64, pos, 0.1, derive_seed(seed, {i}));
    b.samples.push_back({b.embeddings[i], pos, nullptr, 0.5 + rng.uniform()});
  }
  for (std::size_t i = 0; i < n; ++i) b.samples[i].negatives = &b.negatives[i];
  return b;
}

}  // namespace

TEST_CASE("sharded loss agrees with a single shard") {
  Rng rng(14);
  for (int t = 0; t < 10; ++t) {
    const auto b = random_batch(rng, static_cast<std::uint64_t>(t));
    const auto base = sharded_loss<double>(b.samples, shard_partition(64, 1), b.state);
    // W = 1 against the per-sample functions.
    double direct = 0;
    for (std::size_t i = 0; i < b.samples.size(); ++i) {
      const auto& s = b.samples[i];
      const double l = s.positives.size() == 1 && s.positives[0] < 40
                           ? object_loss<double>(s.embedding, s.positives[0], *s.negatives, b.state).loss
                           : ocr_loss<double>(s.embedding, s.positives, *s.negatives, b.state).loss;
      CHECK(std::abs(base.sample_loss[i] - l) <= 1e-12);
      direct += s.weight * l;
    }
    CHECK(std::abs(base.loss - direct) <= 1e-12);
    for (std::size_t w : {2u, 4u, 8u}) {
      const auto r = sharded_loss<double>(b.samples, shard_partition(64, w), b.state);
      CHECK(std::abs(r.loss - base.loss) <= 1e-12);
      CHECK(max_abs_diff(r.d_centers, base.d_centers) <= 1e-12);
      for (std::size_t i = 0; i < b.samples.size(); ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(r.d_embedding[i][j] - base.d_embedding[i][j]) <= 1e-12);
    }
  }
}

TEST_CASE("shard evaluation order does not matter") {
  Rng rng(15);
  const auto b = random_batch(rng, 3);
  const auto layout = shard_partition(64, 4);
  const auto a = sharded_loss<double>(b.samples, layout, b.state);
  const std::vector<std::size_t> order{2, 0, 3, 1};
  const auto c = sharded_loss<double>(b.samples, layout, b.state, order);
  CHECK(a.loss == c.loss);
  CHECK(a.d_centers == c.d_centers);
  const std::vector<std::size_t> bad{0, 0, 1, 2};
  CHECK_THROWS_AS(sharded_loss<double>(b.samples, layout, b.state, bad), LossError);
  CHECK_THROWS_AS(sharded_loss<double>(b.samples, shard_partition(63, 4), b.state), LossError);
}

TEST_CASE("sharded loss at f32") {
  Rng rng(16);
  const auto b = random_batch(rng, 5);
  ClassifierState<float> sf{b.state.centers.cast<float>(), 0.3f, 16.0f, 40};
  std::vector<std::vector<float>> ef;
  for (const auto& e : b.embeddings) ef.emplace_back(e.begin(), e.end());
  std::vector<LossSample<float>> samples;
  for (std::size_t i = 0; i < ef.size(); ++i)
    samples.push_back({ef[i], b.samples[i].positives, &b.negatives[i], static_cast<float>(b.samples[i].weight)});
  const auto base = sharded_loss<float>(samples, shard_partition(64, 1), sf);
  for (std::size_t w : {2u, 4u, 8u}) {
    const auto r = sharded_loss<float>(samples, shard_partition(64, w), sf);
    CHECK(std::abs(r.loss - base.loss) <= 1e-6f * std::max(1.0f, base.loss));
    CHECK(max_abs_diff(r.d_centers, base.d_centers) <= 1e-6f);
  }
}

TEST_CASE("classifier state validation") {
  Rng rng(17);
  auto st = random_state(4, 3, rng);
  CHECK_NOTHROW(st.validate());
  st.margin = 1.0;
  CHECK_THROWS_AS(st.validate(), LossError);
  st.margin = 0.3;
  st.scale = 0;
  CHECK_THROWS_AS(st.validate(), LossError);
  st.scale = 64;
  st.ocr_offset = 5;
  CHECK_THROWS_AS(st.validate(), LossError);
}

}  // TEST_SUITE
