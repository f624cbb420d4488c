// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include "rice/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "rice/random.hpp"
#include "rice/trainer.hpp"

namespace rice {

namespace {

constexpr double kStep = 1e-6;

using Objective = std::function<double()>;

// Central differences of f with respect to every entry of `values`.
std::vector<double> numeric_gradient(std::span<double> values, const Objective& f) {
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    const double h = kStep * std::max(1.0, std::abs(orig));
    values[i] = orig + h;
    const double up = f();
    values[i] = orig - h;
    const double down = f();
    values[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

void fill_normal(Matrix<double>& m, Rng& rng, double std = 1.0) {
  for (auto& x : m.storage()) x = std * rng.normal();
}

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.normal();
  const double n = l2_norm<double>(v);
  for (auto& x : v) x /= n;
  return v;
}

AttentionWeights<double> random_attention(std::size_t d, int heads, Rng& rng) {
  AttentionWeights<double> w;
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
    *m = Matrix<double>(d, d);
    fill_normal(*m, rng, std);
  }
  for (auto* m : {&w.bq, &w.bk, &w.bv, &w.bo}) {
    *m = Matrix<double>(1, d);
    fill_normal(*m, rng, 0.1);
  }
  w.heads = heads;
  return w;
}

std::vector<Matrix<double>*> attention_tensors(AttentionWeights<double>& w) {
  return {&w.wq, &w.bq, &w.wk, &w.bk, &w.wv, &w.bv, &w.wo, &w.bo};
}

template <typename T>
void append(std::vector<double>& out, const Matrix<T>& m) {
  out.insert(out.end(), m.storage().begin(), m.storage().end());
}

Image random_image(int h, int w, int c, Rng& rng) {
  Image img;
  img.height = h;
  img.width = w;
  img.channels = c;
  img.pixels = Matrix<float>(static_cast<std::size_t>(h) * w, c);
  for (auto& x : img.pixels.storage()) x = static_cast<float>(rng.uniform());
  return img;
}

BBox random_bbox(int h, int w, Rng& rng) {
  BBox b;
  b.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
  b.x1 = b.x0 + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(w - b.x0)));
  b.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
  b.y1 = b.y0 + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(h - b.y0)));
  return b;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.layers = 2;
  c.region_layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.patch = 4;
  c.height = 12;
  c.width = 12;
  c.channels = 3;
  c.mlp_hidden = 16;
  return c;
}

// Encoder init is tuned for training; checks use larger weights so every
// path carries a gradient well above the differencing noise.
EncoderParams<double> random_encoder(const EncoderConfig& c, Rng& rng) {
  auto p = EncoderParams<double>::init(c, rng.next_u64());
  for (auto& [name, t] : p.tensors()) {
    const bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    for (auto& x : t->storage()) x += (gain ? 0.3 : 0.1) * rng.normal();
  }
  return p;
}

// ---------------------------------------------------------------------------

double check_loss(bool ocr, int trials, std::uint64_t seed, Fault fault) {
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    const std::size_t d = 8, k = 24;
    ClassifierState<double> st;
    st.centers = Matrix<double>(k, d);
    fill_normal(st.centers, rng);
    normalize_rows(st.centers);
    st.margin = rng.uniform(0.0, 0.5);
    st.scale = std::array<double, 3>{1.0, 8.0, 64.0}[rng.below(3)];
    auto emb = random_unit(d, rng);

    std::vector<std::size_t> pos;
    if (ocr) {
      for (int i = 0; i < 4; ++i) pos.push_back(rng.below(k));
      pos.push_back(pos[0]);  // repeated token
    } else {
      pos.push_back(rng.below(k));
    }
    const auto negs = sample_negatives(k, pos, ocr ? 8.0 / k : 5.0 / k, rng.next_u64());

    const auto res = ocr ? ocr_loss<double>(emb, pos, negs, st) : object_loss<double>(emb, pos[0], negs, st);
    // A margin applied with the wrong sign on one side must be caught.
    const double ref_margin = fault == Fault::MarginSign ? -st.margin : st.margin;

    // Variables: the embedding and every touched center.
    std::vector<std::size_t> touched;
    for (const auto& cg : res.d_centers) touched.push_back(cg.id);
    std::vector<double> vars(emb);
    for (auto id : touched) vars.insert(vars.end(), st.centers.row(id).begin(), st.centers.row(id).end());

    auto row_of = [&](std::size_t id) {
      const auto at = std::find(touched.begin(), touched.end(), id) - touched.begin();
      return std::vector<double>(vars.begin() + static_cast<long>(d * (1 + at)),
                                 vars.begin() + static_cast<long>(d * (2 + at)));
    };
    Objective f = [&] {
      std::span<const double> e(vars.data(), d);
      std::vector<std::vector<double>> neg_rows, pos_rows;
      for (auto id : negs.ids) neg_rows.push_back(row_of(id));
      for (auto id : pos) pos_rows.push_back(row_of(id));
      return static_cast<double>(ocr ? reference_ocr_loss(e, pos_rows, neg_rows, ref_margin, st.scale)
                                     : reference_object_loss(e, pos_rows[0], neg_rows, ref_margin, st.scale));
    };
    const auto numeric = numeric_gradient(vars, f);
    std::vector<double> analytic(res.d_embedding);
    for (const auto& cg : res.d_centers) analytic.insert(analytic.end(), cg.grad.begin(), cg.grad.end());
    worst = std::max(worst, relative_error(analytic, numeric));
    // The loss value itself must agree with the reference too.
    const double value_err = std::abs(res.loss - f()) / std::max(1.0, std::abs(f()));
    worst = std::max(worst, value_err);
  }
  return worst;
}

double check_region_attention(int trials, std::uint64_t seed) {
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    const int heads = std::array<int, 3>{1, 2, 4}[rng.below(3)];
    const std::size_t d = 8, l = 1 + rng.below(4);
    const int rows = 1 + static_cast<int>(rng.below(3)), cols = 1 + static_cast<int>(rng.below(3)), p = 4;
    std::vector<Region> regions;
    for (std::size_t r = 0; r < l; ++r) regions.push_back(Region::object(random_bbox(rows * p, cols * p, rng), 0));
    const auto mask = build_visibility_mask(regions, rows, cols, p);
    Matrix<double> queries(l, d), tokens(static_cast<std::size_t>(rows * cols), d), weight(l, d);
    fill_normal(queries, rng);
    fill_normal(tokens, rng);
    fill_normal(weight, rng);
    auto w = random_attention(d, heads, rng);

    Objective f = [&] {
      const auto out = region_attention(queries, tokens, mask, w);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * weight.data()[i];
      return s;
    };
    AttentionCache<double> cache;
    region_attention(queries, tokens, mask, w, &cache);
    AttentionWeights<double> gw = w;
    for (auto* m : attention_tensors(gw)) m->set_zero();
    Matrix<double> dq(queries.rows(), d), dt(tokens.rows(), d);
    region_attention_backward(cache, weight, mask, w, gw, dq, dt);

    std::vector<double> analytic, numeric;
    append(analytic, dq);
    append(analytic, dt);
    for (auto* m : attention_tensors(gw)) append(analytic, *m);
    for (auto* m : {&queries, &tokens}) {
      auto g = numeric_gradient(m->storage(), f);
      numeric.insert(numeric.end(), g.begin(), g.end());
    }
    for (auto* m : attention_tensors(w)) {
      auto g = numeric_gradient(m->storage(), f);
      numeric.insert(numeric.end(), g.begin(), g.end());
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

double check_encoder(int trials, std::uint64_t seed) {
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    const auto cfg = small_encoder();
    auto params = random_encoder(cfg, rng);
    const auto img = random_image(cfg.height, cfg.width, cfg.channels, rng);
    std::vector<Region> regions;
    // Odd trials use whole-image regions, so the mask is all-visible.
    for (int r = 0; r < 3; ++r)
      regions.push_back(Region::object(t % 2 ? BBox{0, 0, cfg.width, cfg.height}
                                             : random_bbox(cfg.height, cfg.width, rng),
                                       0));
    Matrix<double> weight(regions.size(), static_cast<std::size_t>(cfg.dim));
    fill_normal(weight, rng);

    Objective f = [&] {
      const auto out = encode(img, regions, params);
      double s = 0;
      for (std::size_t i = 0; i < weight.size(); ++i) s += out.region_embeddings.data()[i] * weight.data()[i];
      return s;
    };
    EncodeCache<double> cache;
    encode(img, regions, params, &cache);
    auto grads = EncoderParams<double>::zeros(cfg);
    encode_backward(cache, weight, params, grads);

    std::vector<double> analytic, numeric;
    for (auto& [name, m] : grads.tensors()) append(analytic, *m);
    for (auto& [name, m] : params.tensors()) {
      auto g = numeric_gradient(m->storage(), f);
      numeric.insert(numeric.end(), g.begin(), g.end());
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

double check_end_to_end(int trials, std::uint64_t seed) {
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    TrainConfig config;
    config.encoder = small_encoder();
    config.regions_per_image = 3;
    config.object_classes = 6;
    config.ocr_classes = 5;
    config.rho = 0.5;
    config.shards = 2;
    config.negatives = t % 2 ? NegativeScope::PerRegion : NegativeScope::PerImage;
    const auto& ec = config.encoder;

    RegionBatch batch;
    std::vector<Image> images;
    for (int i = 0; i < 2; ++i) {
      ImageRecord rec;
      rec.image_id = "check" + std::to_string(i);
      rec.height = ec.height;
      rec.width = ec.width;
      std::vector<SampledRegion> sampled;
      for (int j = 0; j < config.regions_per_image; ++j) {
        const auto box = random_bbox(ec.height, ec.width, rng);
        Region r = j == 0 ? Region::ocr(box, {static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5))})
                          : Region::object(box, static_cast<int>(rng.below(6)));
        // Keep an image's positives disjoint so sampling stays feasible.
        if (j == 2 && r.object_label == rec.regions[1].object_label) r.object_label = (*r.object_label + 1) % 6;
        rec.regions.push_back(r);
        sampled.push_back({r, static_cast<std::size_t>(j), false});
      }
      batch.records.push_back(rec);
      batch.sampled.push_back(sampled);
      images.push_back(random_image(ec.height, ec.width, ec.channels, rng));
    }

    auto params = random_encoder(ec, rng);
    ClassifierState<double> cls;
    cls.centers = Matrix<double>(config.total_classes(), static_cast<std::size_t>(ec.dim));
    fill_normal(cls.centers, rng);
    normalize_rows(cls.centers);
    cls.margin = config.margin;
    cls.scale = 8.0;  // keeps every softmax term away from saturation
    cls.ocr_offset = static_cast<std::size_t>(config.object_classes);
    const auto neg_seed = rng.next_u64();

    const auto ev = evaluate_batch(batch, images, params, cls, config, neg_seed);

    Objective f = [&] { return evaluate_batch(batch, images, params, cls, config, neg_seed, false).loss; };
    std::vector<double> analytic, numeric;
    for (auto& [name, m] : ev.d_encoder.tensors()) append(analytic, *m);
    append(analytic, ev.d_centers);
    for (auto& [name, m] : params.tensors()) {
      auto g = numeric_gradient(m->storage(), f);
      numeric.insert(numeric.end(), g.begin(), g.end());
    }
    auto g = numeric_gradient(cls.centers.storage(), f);
    numeric.insert(numeric.end(), g.begin(), g.end());
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw std::invalid_argument("relative_error: length mismatch");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (!std::isfinite(diff)) return std::numeric_limits<double>::infinity();
  return scale > 0 ? diff / scale : 0.0;
}

namespace {

long double ref_cos(std::span<const double> a, std::span<const double> b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return std::clamp(s, -1.0L, 1.0L);
}

long double ref_negative_term(std::span<const double> e, const std::vector<std::vector<double>>& negs, double s) {
  long double sum = 0;
  for (const auto& n : negs) sum += std::exp(static_cast<long double>(s) * ref_cos(e, n));
  return std::log1p(sum);
}

}  // namespace

long double reference_object_loss(std::span<const double> embedding, std::span<const double> positive,
                                  const std::vector<std::vector<double>>& negatives, double margin, double scale) {
  const long double pos_logit = static_cast<long double>(scale) * (ref_cos(embedding, positive) - margin);
  return std::log1p(std::exp(-pos_logit)) + ref_negative_term(embedding, negatives, scale);
}

long double reference_ocr_loss(std::span<const double> embedding, const std::vector<std::vector<double>>& positives,
                               const std::vector<std::vector<double>>& negatives, double margin, double scale) {
  long double sum = 0;
  for (const auto& p : positives)
    sum += std::exp(-static_cast<long double>(scale) * (ref_cos(embedding, p) - margin));
  return std::log1p(sum) + ref_negative_term(embedding, negatives, scale);
}

Matrix<double> dense_attention_oracle(std::span<const double> query, const Matrix<double>& tokens,
                                      const AttentionWeights<double>& w) {
  const std::size_t d = query.size(), n = tokens.rows();
  const std::size_t hd = d / static_cast<std::size_t>(w.heads);
  auto project = [&](std::span<const double> x, const Matrix<double>& wm, const Matrix<double>& b) {
    std::vector<double> out(d);
    for (std::size_t c = 0; c < d; ++c) {
      double s = b(0, c);
      for (std::size_t k = 0; k < d; ++k) s += x[k] * wm(k, c);
      out[c] = s;
    }
    return out;
  };
  const auto q = project(query, w.wq, w.bq);
  std::vector<std::vector<double>> k, v;
  for (std::size_t j = 0; j < n; ++j) {
    k.push_back(project(tokens.row(j), w.wk, w.bk));
    v.push_back(project(tokens.row(j), w.wv, w.bv));
  }
  std::vector<double> concat(d, 0.0);
  for (int h = 0; h < w.heads; ++h) {
    const std::size_t lo = static_cast<std::size_t>(h) * hd;
    std::vector<double> score(n);
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = lo; c < lo + hd; ++c) s += q[c] * k[j][c];
      score[j] = s / std::sqrt(static_cast<double>(hd));
      hi = std::max(hi, score[j]);
    }
    double z = 0;
    for (auto& s : score) z += (s = std::exp(s - hi));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = lo; c < lo + hd; ++c) concat[c] += score[j] / z * v[j][c];
  }
  Matrix<double> out(1, d);
  const auto o = project(concat, w.wo, w.bo);
  std::copy(o.begin(), o.end(), out.row(0).begin());
  return out;
}

double mask_oracle_check(int configs, std::uint64_t seed) {
  double worst = 0;
  for (int t = 0; t < configs; ++t) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    const int heads = std::array<int, 3>{1, 2, 4}[rng.below(3)];
    const std::size_t d = static_cast<std::size_t>(heads) * (1 + rng.below(32 / static_cast<std::uint64_t>(heads)));
    const std::size_t l = 1 + rng.below(8);
    const int rows = 1 + static_cast<int>(rng.below(8)), cols = 1 + static_cast<int>(rng.below(8));
    const int p = 1 + static_cast<int>(rng.below(16));
    std::vector<Region> regions;
    for (std::size_t r = 0; r < l; ++r) regions.push_back(Region::object(random_bbox(rows * p, cols * p, rng), 0));
    const auto mask = build_visibility_mask(regions, rows, cols, p);
    Matrix<double> queries(l, d), tokens(static_cast<std::size_t>(rows * cols), d);
    fill_normal(queries, rng);
    fill_normal(tokens, rng);
    const auto w = random_attention(d, heads, rng);
    const auto out = region_attention(queries, tokens, mask, w);
    for (std::size_t r = 0; r < l; ++r) {
      Matrix<double> visible(mask.visible_count(r), d);
      std::size_t at = 0;
      for (std::size_t j = 0; j < tokens.rows(); ++j)
        if (mask.visible(r, j)) std::copy_n(tokens.row(j).begin(), d, visible.row(at++).begin());
      const auto ref = dense_attention_oracle(queries.row(r), visible, w);
      for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(out(r, c) - ref(0, c)));
    }
  }
  return worst;
}

const std::vector<std::string>& grad_check_components() {
  static const std::vector<std::string> names{"object_loss", "ocr_loss", "region_attention", "encoder",
                                              "end_to_end"};
  return names;
}

double grad_check(const std::string& component, int trials, std::uint64_t seed, Fault fault) {
  if (component == "object_loss") return check_loss(false, trials, seed, fault);
  if (component == "ocr_loss") return check_loss(true, trials, seed, fault);
  if (component == "region_attention") return check_region_attention(trials, seed);
  if (component == "encoder") return check_encoder(trials, seed);
  if (component == "end_to_end") return check_end_to_end(trials, seed);
  throw std::invalid_argument("unknown grad_check component '" + component + "'");
}

std::vector<std::string> check_suites() {
  auto s = grad_check_components();
  s.push_back("mask_oracle");
  return s;
}

CheckReport run_check(const std::string& suite, std::uint64_t seed, Fault fault) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckReport r;
  r.component = suite;
  if (suite == "mask_oracle") {
    r.trials = 100;
    r.tolerance = 1e-6;
    r.value = mask_oracle_check(r.trials, seed);
  } else {
    const bool loss = suite == "object_loss" || suite == "ocr_loss";
    r.trials = loss ? 20 : suite == "end_to_end" ? 5 : suite == "encoder" ? 4 : 20;
    r.tolerance = suite == "end_to_end" ? 1e-5 : 1e-6;
    r.value = grad_check(suite, r.trials, seed, fault);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace rice
