// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include "rice/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rice/binary_io.hpp"
#include "rice/random.hpp"

namespace rice {

void TrainConfig::validate() const {
  encoder.validate();
  if (regions_per_image < 1) throw ConfigError("train: regions_per_image must be >= 1");
  if (object_classes < 1) throw ConfigError("train: object_classes must be >= 1");
  if (ocr_classes < 0) throw ConfigError("train: ocr_classes must be >= 0");
  if (!(rho > 0 && rho <= 1)) throw ConfigError("train: rho must lie in (0, 1]");
  if (negative_count(static_cast<std::size_t>(object_classes), rho) < 1)
    throw ConfigError("train: floor(K * rho) must be >= 1");
  if (!(margin >= 0 && margin < 1)) throw ConfigError("train: margin must lie in [0, 1)");
  if (!(scale > 0)) throw ConfigError("train: scale must be positive");
  if (!(lr >= 0) || !(weight_decay >= 0)) throw ConfigError("train: lr and weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0))
    throw ConfigError("train: invalid Adam hyperparameters");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (!(lambda_ocr >= 0)) throw ConfigError("train: lambda_ocr must be >= 0");
  if (shards < 1 || static_cast<std::size_t>(shards) > total_classes())
    throw ConfigError("train: shards must lie in [1, K_total]");
  if (threads < 1) throw ConfigError("train: threads must be >= 1");
}

std::string StepMetrics::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["object_loss"] = object_loss;
  j["ocr_loss"] = ocr_loss;
  j["grad_norm"] = grad_norm;
  j["mean_pos_cos"] = mean_pos_cos;
  j["mean_neg_cos"] = mean_neg_cos;
  return j.dump();
}

TrainState TrainState::init(const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  TrainState s;
  s.encoder = EncoderParams<float>::init(config.encoder, derive_seed(seed, {1}));
  s.classifier.centers = Matrix<float>(config.total_classes(), config.encoder.dim);
  Rng rng(derive_seed(seed, {2}));
  for (auto& x : s.classifier.centers.storage()) x = static_cast<float>(rng.normal());
  normalize_rows(s.classifier.centers);
  s.classifier.margin = static_cast<float>(config.margin);
  s.classifier.scale = static_cast<float>(config.scale);
  s.classifier.ocr_offset = static_cast<std::size_t>(config.object_classes);
  return s;
}

template <typename T>
Matrix<T> normalized(const Matrix<T>& m) {
  Matrix<T> out = m;
  normalize_rows(out);
  return out;
}

template Matrix<float> normalized(const Matrix<float>&);
template Matrix<double> normalized(const Matrix<double>&);

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots; callers reduce them in index order.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

template <typename T>
struct ImageWork {
  EncodeCache<T> cache;
  Matrix<T> raw;   // unnormalized region embeddings
  Matrix<T> unit;  // normalized
  EncoderParams<T> grads;
};

void adam_update(const std::string& name, Matrix<float>& param, const Matrix<float>& grad, AdamState& st,
                 const TrainConfig& c, bool decay, double bias1, double bias2) {
  auto mit = st.m.try_emplace(name, param.rows(), param.cols()).first;
  auto vit = st.v.try_emplace(name, param.rows(), param.cols()).first;
  auto& m = mit->second;
  auto& v = vit->second;
  if (!m.same_shape(param) || !v.same_shape(param)) throw ShapeError("optimizer state shape mismatch for " + name);
  const float b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
  const float lr = static_cast<float>(c.lr);
  const float shrink = decay ? static_cast<float>(1.0 - c.lr * c.weight_decay) : 1.0f;
  const float eps = static_cast<float>(c.eps);
  const float inv_b1 = static_cast<float>(1.0 / bias1), inv_b2 = static_cast<float>(1.0 / bias2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad.data()[i];
    float& mi = m.data()[i];
    float& vi = v.data()[i];
    mi = b1 * mi + (1.0f - b1) * g;
    vi = b2 * vi + (1.0f - b2) * g * g;
    const float mhat = mi * inv_b1, vhat = vi * inv_b2;
    float& p = param.data()[i];
    p *= shrink;
    p -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

// Gradient of ŷ = e/‖e‖ pulled back to e, row by row.
template <typename T>
void normalize_backward(const Matrix<T>& raw, const Matrix<T>& unit, const Matrix<T>& d_unit, Matrix<T>& d_raw) {
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const T n = l2_norm<T>(raw.row(r));
    const T proj = dot<T>(unit.row(r), d_unit.row(r));
    for (std::size_t c = 0; c < raw.cols(); ++c) d_raw(r, c) = (d_unit(r, c) - unit(r, c) * proj) / n;
  }
}

NegativeSample offset_ids(NegativeSample ns, std::size_t off) {
  for (auto& id : ns.ids) id += off;
  return ns;
}

}  // namespace

template <typename T>
BatchEvaluation<T> evaluate_batch(const RegionBatch& batch, const std::vector<Image>& images,
                                  const EncoderParams<T>& encoder, const ClassifierState<T>& classifier,
                                  const TrainConfig& config, std::uint64_t seed, bool backward) {
  const std::size_t nimg = batch.records.size();
  if (images.size() != nimg || batch.sampled.size() != nimg)
    throw std::invalid_argument("images and batch disagree in size");
  for (const auto& s : batch.sampled)
    if (s.size() != static_cast<std::size_t>(config.regions_per_image))
      throw std::invalid_argument("batch is not sampled to exactly N regions per image");
  if (!(encoder.config == config.encoder)) throw ConfigError("encoder config mismatch");
  if (classifier.num_classes() != config.total_classes())
    throw ConfigError("classifier size does not match K + V");

  const std::size_t k_obj = static_cast<std::size_t>(config.object_classes);
  const std::size_t v_ocr = static_cast<std::size_t>(config.ocr_classes);
  const std::size_t off = classifier.ocr_offset;

  // Forward.
  std::vector<ImageWork<T>> work(nimg);
  std::vector<std::vector<Region>> regions(nimg);
  for (std::size_t i = 0; i < nimg; ++i)
    for (const auto& s : batch.sampled[i]) regions[i].push_back(s.region);
  parallel_for(nimg, config.threads, [&](std::size_t i) {
    auto out = encode(images[i], regions[i], encoder, backward ? &work[i].cache : nullptr);
    work[i].raw = std::move(out.region_embeddings);
    work[i].unit = normalized(work[i].raw);
  });

  // Labels, negatives, weights.
  std::size_t n_obj = 0, n_ocr = 0;
  for (std::size_t i = 0; i < nimg; ++i)
    for (const auto& s : batch.sampled[i]) {
      if (config.dedup_resamples && s.duplicate) continue;
      (s.region.kind == RegionKind::Object ? n_obj : n_ocr)++;
    }
  struct SampleRef {
    std::size_t image, region;
    bool object;
    std::size_t negatives;
  };
  std::vector<NegativeSample> negatives;
  std::vector<LossSample<T>> samples;
  std::vector<SampleRef> refs;
  for (std::size_t i = 0; i < nimg; ++i) {
    std::vector<std::size_t> obj_pos, ocr_pos;
    for (const auto& s : batch.sampled[i]) {
      const auto& r = s.region;
      if (r.kind == RegionKind::Object) {
        const auto label = static_cast<std::size_t>(*r.object_label);
        if (label >= k_obj)
          throw ConfigError("image '" + batch.records[i].image_id + "': object label " + std::to_string(label) +
                            " >= K=" + std::to_string(k_obj));
        obj_pos.push_back(label);
      } else {
        if (v_ocr == 0) throw ConfigError("OCR region present but ocr_classes is 0");
        for (int t : r.ocr_labels) {
          if (static_cast<std::size_t>(t) >= v_ocr)
            throw ConfigError("image '" + batch.records[i].image_id + "': OCR token " + std::to_string(t) +
                              " >= V=" + std::to_string(v_ocr));
          ocr_pos.push_back(static_cast<std::size_t>(t));
        }
      }
    }
    std::size_t obj_slot = 0, ocr_slot = 0;
    if (config.negatives == NegativeScope::PerImage) {
      if (!obj_pos.empty()) {
        obj_slot = negatives.size();
        negatives.push_back(sample_negatives(k_obj, obj_pos, config.rho, derive_seed(seed, {i, 0})));
      }
      if (!ocr_pos.empty()) {
        ocr_slot = negatives.size();
        negatives.push_back(offset_ids(sample_negatives(v_ocr, ocr_pos, config.rho, derive_seed(seed, {i, 1})), off));
      }
    }
    for (std::size_t j = 0; j < batch.sampled[i].size(); ++j) {
      const auto& s = batch.sampled[i][j];
      const auto& r = s.region;
      const bool object = r.kind == RegionKind::Object;
      LossSample<T> ls;
      ls.embedding = work[i].unit.row(j);
      std::vector<std::size_t> local;
      if (object) {
        local = {static_cast<std::size_t>(*r.object_label)};
        ls.positives = local;
      } else {
        for (int t : r.ocr_labels) {
          local.push_back(static_cast<std::size_t>(t));
          ls.positives.push_back(off + static_cast<std::size_t>(t));
        }
      }
      if (config.dedup_resamples && s.duplicate)
        ls.weight = T(0);
      else
        ls.weight = object ? T(1) / static_cast<T>(n_obj) : static_cast<T>(config.lambda_ocr) / static_cast<T>(n_ocr);
      std::size_t slot = object ? obj_slot : ocr_slot;
      if (config.negatives == NegativeScope::PerRegion) {
        slot = negatives.size();
        const auto s2 = derive_seed(seed, {i, 2, j});
        negatives.push_back(object ? sample_negatives(k_obj, local, config.rho, s2)
                                   : offset_ids(sample_negatives(v_ocr, local, config.rho, s2), off));
      }
      samples.push_back(std::move(ls));
      refs.push_back({i, j, object, slot});
    }
  }
  for (std::size_t q = 0; q < samples.size(); ++q) samples[q].negatives = &negatives[refs[q].negatives];

  auto numeric_failure = [&](const char* what, std::size_t q) {
    const auto& ref = refs[q];
    std::ostringstream os;
    os << what << ": image '" << batch.records[ref.image].image_id << "' sampled region " << ref.region
       << " (source index " << batch.sampled[ref.image][ref.region].source_index << "), embedding norm "
       << l2_norm<T>(work[ref.image].raw.row(ref.region));
    return NumericError(os.str());
  };
  for (std::size_t q = 0; q < samples.size(); ++q) {
    const T n = l2_norm<T>(work[refs[q].image].raw.row(refs[q].region));
    if (!std::isfinite(n) || n == T(0)) throw numeric_failure("degenerate region embedding", q);
  }

  const auto layout = shard_partition(config.total_classes(), static_cast<std::size_t>(config.shards));
  auto loss = sharded_loss<T>(samples, layout, classifier);

  BatchEvaluation<T> ev;
  ev.loss = loss.loss;
  double obj_sum = 0, ocr_sum = 0;
  for (std::size_t q = 0; q < samples.size(); ++q) {
    const double l = static_cast<double>(loss.sample_loss[q]);
    if (!std::isfinite(l)) throw numeric_failure("non-finite loss", q);
    if (samples[q].weight == T(0)) continue;
    (refs[q].object ? obj_sum : ocr_sum) += l;
  }
  ev.object_loss = n_obj ? obj_sum / static_cast<double>(n_obj) : 0.0;
  ev.ocr_loss = n_ocr ? ocr_sum / static_cast<double>(n_ocr) : 0.0;
  auto mean = [](const std::vector<T>& v) {
    double s = 0;
    for (T x : v) s += static_cast<double>(x);
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  ev.mean_pos_cos = mean(loss.pos_cos);
  ev.mean_neg_cos = mean(loss.neg_cos);
  ev.d_centers = std::move(loss.d_centers);
  ev.d_encoder = EncoderParams<T>::zeros(config.encoder);
  if (!backward) return ev;

  // Backward, one gradient buffer per image, reduced in image order.
  std::vector<std::size_t> first_sample(nimg, 0);
  for (std::size_t q = samples.size(); q-- > 0;) first_sample[refs[q].image] = q;
  parallel_for(nimg, config.threads, [&](std::size_t i) {
    const auto& unit = work[i].unit;
    Matrix<T> d_unit(unit.rows(), unit.cols());
    for (std::size_t j = 0; j < unit.rows(); ++j) {
      const auto& g = loss.d_embedding[first_sample[i] + j];
      std::copy(g.begin(), g.end(), d_unit.row(j).begin());
    }
    Matrix<T> d_raw(unit.rows(), unit.cols());
    normalize_backward(work[i].raw, unit, d_unit, d_raw);
    work[i].grads = EncoderParams<T>::zeros(config.encoder);
    encode_backward(work[i].cache, d_raw, encoder, work[i].grads);
    work[i].cache = {};
  });
  for (auto& w : work) ev.d_encoder += w.grads;
  return ev;
}

template BatchEvaluation<float> evaluate_batch(const RegionBatch&, const std::vector<Image>&,
                                               const EncoderParams<float>&, const ClassifierState<float>&,
                                               const TrainConfig&, std::uint64_t, bool);
template BatchEvaluation<double> evaluate_batch(const RegionBatch&, const std::vector<Image>&,
                                                const EncoderParams<double>&, const ClassifierState<double>&,
                                                const TrainConfig&, std::uint64_t, bool);

StepMetrics train_step(const RegionBatch& batch, const std::vector<Image>& images, TrainState& state,
                       const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  StepMetrics metrics;
  metrics.step = state.step + 1;
  BatchEvaluation<float> ev;
  try {
    ev = evaluate_batch(batch, images, state.encoder, state.classifier, config, seed);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(metrics.step) + ": " + e.what());
  }
  metrics.object_loss = ev.object_loss;
  metrics.ocr_loss = ev.ocr_loss;
  metrics.mean_pos_cos = ev.mean_pos_cos;
  metrics.mean_neg_cos = ev.mean_neg_cos;

  double gn2 = 0;
  for (auto& [name, t] : ev.d_encoder.tensors())
    for (float x : t->storage()) gn2 += static_cast<double>(x) * x;
  for (float x : ev.d_centers.storage()) gn2 += static_cast<double>(x) * x;
  metrics.grad_norm = std::sqrt(gn2);

  // Update.
  auto& adam = state.adam;
  ++adam.step;
  const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(adam.step));
  const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(adam.step));
  auto params = state.encoder.tensors();
  auto gts = ev.d_encoder.tensors();
  for (std::size_t t = 0; t < params.size(); ++t)
    adam_update(params[t].first, *params[t].second, *gts[t].second, adam, config, !is_no_decay(params[t].first),
                bias1, bias2);
  // Only rows the update moved are projected back; renormalizing an
  // unchanged unit row in f32 can still flip its last bits.
  const auto before = state.classifier.centers;
  adam_update("classifier.centers", state.classifier.centers, ev.d_centers, adam, config, false, bias1, bias2);
  auto& centers = state.classifier.centers;
  for (std::size_t k = 0; k < centers.rows(); ++k) {
    auto row = centers.row(k);
    if (std::equal(row.begin(), row.end(), before.row(k).begin())) continue;
    const float n = l2_norm<float>(row);
    if (n > 0.0f)
      for (auto& x : row) x /= n;
  }
  ++state.step;

  if (!std::isfinite(metrics.grad_norm) || !std::isfinite(metrics.mean_pos_cos) ||
      !std::isfinite(metrics.mean_neg_cos))
    throw NumericError("non-finite metrics at step " + std::to_string(metrics.step));
  return metrics;
}

RegionBatch step_batch(const std::vector<ImageRecord>& records, const TrainConfig& config, std::int64_t step) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!records[i].regions.empty()) usable.push_back(i);
  if (usable.empty()) throw ConfigError("no image with regions to train on");
  const auto s = derive_seed(config.seed, {0xBA7C, static_cast<std::uint64_t>(step)});
  Rng rng(s);
  const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), usable.size());
  for (std::size_t i = 0; i < b; ++i) std::swap(usable[i], usable[i + rng.below(usable.size() - i)]);
  std::vector<ImageRecord> chosen;
  for (std::size_t i = 0; i < b; ++i) chosen.push_back(records[usable[i]]);
  return make_batch(std::move(chosen), static_cast<std::size_t>(config.regions_per_image), derive_seed(s, {1}));
}

void train(const std::vector<ImageRecord>& records, TrainState& state, const TrainConfig& config, int steps,
           const std::function<void(const StepMetrics&)>& on_step) {
  config.validate();
  std::map<std::string, Image> rendered;
  for (int t = 0; t < steps; ++t) {
    const std::int64_t step = state.step;
    auto batch = step_batch(records, config, step);
    std::vector<Image> images;
    for (const auto& rec : batch.records) {
      auto it = rendered.find(rec.image_id);
      if (it == rendered.end()) it = rendered.emplace(rec.image_id, render_synthetic(rec)).first;
      images.push_back(it->second);
    }
    const auto m = train_step(batch, images, state, config,
                              derive_seed(config.seed, {0x7E6, static_cast<std::uint64_t>(step)}));
    if (on_step) on_step(m);
  }
}

// ---------------------------------------------------------------------------
// Diagnostics

DistanceHistogram token_distance_histogram(const TokenSequence<float>& tokens, int bins) {
  if (bins < 1) throw std::invalid_argument("token_distance_histogram: bins must be >= 1");
  const auto& p = tokens.patches;
  if (p.rows() < 2) throw std::invalid_argument("token_distance_histogram: need at least 2 patch tokens");
  Matrix<double> u = p.cast<double>();
  for (std::size_t i = 0; i < u.rows(); ++i) {
    const double n = l2_norm<double>(u.row(i));
    if (!(n > 0)) throw std::invalid_argument("token_distance_histogram: zero-norm token");
    for (auto& x : u.row(i)) x /= n;
  }
  DistanceHistogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  double sum = 0;
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = i + 1; j < u.rows(); ++j) {
      double d2 = 0;
      for (std::size_t c = 0; c < u.cols(); ++c) {
        const double diff = u(i, c) - u(j, c);
        d2 += diff * diff;
      }
      const double d = std::sqrt(d2);
      sum += d;
      const auto bin = std::min<std::size_t>(static_cast<std::size_t>(d / 2.0 * bins), h.counts.size() - 1);
      ++h.counts[bin];
      ++h.pairs;
    }
  h.mean = sum / static_cast<double>(h.pairs);
  return h;
}

std::optional<double> cross_class_token_distance(const TokenSequence<float>& tokens, const ImageRecord& record) {
  const int rows = tokens.rows, cols = tokens.cols, p = tokens.patch;
  std::vector<int> cls(static_cast<std::size_t>(rows) * cols, -1);
  for (const auto& r : record.regions) {
    if (r.kind != RegionKind::Object) continue;
    const int latent = r.latent.value_or(r.object_label.value_or(-1));
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) {
        const long cx2 = static_cast<long>(2 * x + 1) * p, cy2 = static_cast<long>(2 * y + 1) * p;
        if (cx2 >= 2L * r.bbox.x0 && cx2 < 2L * r.bbox.x1 && cy2 >= 2L * r.bbox.y0 && cy2 < 2L * r.bbox.y1)
          cls[static_cast<std::size_t>(y) * cols + x] = latent;
      }
  }
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cls.size(); ++i)
    for (std::size_t j = i + 1; j < cls.size(); ++j) {
      if (cls[i] < 0 || cls[j] < 0 || cls[i] == cls[j]) continue;
      const double ni = l2_norm<float>(tokens.patches.row(i)), nj = l2_norm<float>(tokens.patches.row(j));
      double d2 = 0;
      for (std::size_t c = 0; c < tokens.patches.cols(); ++c) {
        const double diff = tokens.patches(i, c) / ni - tokens.patches(j, c) / nj;
        d2 += diff * diff;
      }
      sum += std::sqrt(d2);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

RegionAccuracy nearest_center_accuracy(const std::vector<ImageRecord>& records, const TrainState& state) {
  RegionAccuracy acc;
  const std::size_t k_obj = state.classifier.ocr_offset;
  for (const auto& rec : records) {
    std::vector<Region> objs;
    for (const auto& r : rec.regions)
      if (r.kind == RegionKind::Object) objs.push_back(r);
    if (objs.empty()) continue;
    const auto img = render_synthetic(rec);
    const auto out = encode(img, objs, state.encoder);
    const auto unit = normalized(out.region_embeddings);
    for (std::size_t j = 0; j < objs.size(); ++j) {
      std::size_t best = 0;
      float best_cos = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < k_obj; ++k) {
        const float c = dot<float>(unit.row(j), state.classifier.centers.row(k));
        if (c > best_cos) {
          best_cos = c;
          best = k;
        }
      }
      acc.correct += best == static_cast<std::size_t>(*objs[j].object_label);
      ++acc.total;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_tensor(BinaryWriter& w, const std::string& name, const Matrix<float>& m) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name);
  w.u32(2);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  w.f32s(m.storage());
}

void put_scalar(BinaryWriter& w, const std::string& name, float v) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name);
  w.u32(0);
  w.f32(v);
}

struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const auto& c = state.encoder.config;
  BinaryWriter w(path);
  w.magic("RICP");
  w.u32(kCheckpointVersion);
  for (int v : {c.layers, c.region_layers, c.heads, c.dim, c.patch, c.height, c.width, c.channels, c.mlp_hidden})
    w.u32(static_cast<std::uint32_t>(v));

  const auto enc = state.encoder.tensors();
  const std::uint32_t count =
      static_cast<std::uint32_t>(enc.size() + 4 + 2 + state.adam.m.size() + state.adam.v.size());
  w.u32(count);
  for (const auto& [name, t] : enc) put_tensor(w, name, *t);
  put_tensor(w, "classifier.centers", state.classifier.centers);
  put_scalar(w, "classifier.m", state.classifier.margin);
  put_scalar(w, "classifier.s", state.classifier.scale);
  put_scalar(w, "classifier.ocr_offset", static_cast<float>(state.classifier.ocr_offset));
  put_scalar(w, "optim.step", static_cast<float>(state.adam.step));
  put_scalar(w, "train.step", static_cast<float>(state.step));
  for (const auto& [name, t] : state.adam.m) put_tensor(w, "optim.m." + name, t);
  for (const auto& [name, t] : state.adam.v) put_tensor(w, "optim.v." + name, t);
  w.close();
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("RICP");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  EncoderConfig c;
  for (int* f : {&c.layers, &c.region_layers, &c.heads, &c.dim, &c.patch, &c.height, &c.width, &c.channels,
                 &c.mlp_hidden})
    *f = static_cast<int>(r.u32());
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": invalid encoder config: " + e.what());
  }

  std::map<std::string, RawTensor> raw;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32();
    if (len > 4096) throw FormatError(path.string() + ": implausible tensor name length");
    auto name = r.bytes(len);
    RawTensor t;
    const auto rank = r.u32();
    if (rank > 8) throw FormatError(path.string() + ": implausible tensor rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    if (n > r.remaining() / 4) throw FormatError(path.string() + ": truncated file");
    t.data.resize(n);
    r.f32s(t.data);
    raw.emplace(std::move(name), std::move(t));
  }
  r.expect_end();

  auto take_matrix = [&](const std::string& name, Matrix<float>& dst) {
    auto it = raw.find(name);
    if (it == raw.end()) throw FormatError(path.string() + ": missing tensor " + name);
    const auto& t = it->second;
    if (t.dims.size() != 2 || t.dims[0] != dst.rows() || t.dims[1] != dst.cols())
      throw FormatError(path.string() + ": tensor " + name + " has the wrong shape");
    std::copy(t.data.begin(), t.data.end(), dst.data());
    raw.erase(it);
  };
  auto take_scalar = [&](const std::string& name) {
    auto it = raw.find(name);
    if (it == raw.end() || !it->second.dims.empty())
      throw FormatError(path.string() + ": missing scalar " + name);
    const float v = it->second.data.at(0);
    raw.erase(it);
    return v;
  };

  TrainState s;
  s.encoder = EncoderParams<float>::zeros(c);
  for (auto& [name, t] : s.encoder.tensors()) take_matrix(name, *t);
  {
    auto it = raw.find("classifier.centers");
    if (it == raw.end() || it->second.dims.size() != 2)
      throw FormatError(path.string() + ": missing classifier.centers");
    s.classifier.centers = Matrix<float>(it->second.dims[0], it->second.dims[1]);
  }
  take_matrix("classifier.centers", s.classifier.centers);
  s.classifier.margin = take_scalar("classifier.m");
  s.classifier.scale = take_scalar("classifier.s");
  s.classifier.ocr_offset = static_cast<std::size_t>(take_scalar("classifier.ocr_offset"));
  s.adam.step = static_cast<std::int64_t>(take_scalar("optim.step"));
  s.step = static_cast<std::int64_t>(take_scalar("train.step"));
  for (auto it = raw.begin(); it != raw.end();) {
    const auto& name = it->first;
    const bool is_m = name.rfind("optim.m.", 0) == 0, is_v = name.rfind("optim.v.", 0) == 0;
    if (!is_m && !is_v) throw FormatError(path.string() + ": unexpected tensor " + name);
    const auto& t = it->second;
    if (t.dims.size() != 2) throw FormatError(path.string() + ": optimizer tensor " + name + " is not a matrix");
    Matrix<float> m(t.dims[0], t.dims[1]);
    std::copy(t.data.begin(), t.data.end(), m.data());
    (is_m ? s.adam.m : s.adam.v).emplace(name.substr(8), std::move(m));
    it = raw.erase(it);
  }
  if (s.classifier.dim() != static_cast<std::size_t>(c.dim))
    throw FormatError(path.string() + ": classifier width differs from the encoder dim");
  return s;
}

}  // namespace rice
