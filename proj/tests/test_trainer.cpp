// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "rice/binary_io.hpp"
#include "rice/trainer.hpp"

using namespace rice;

namespace {

struct Fixture {
  std::vector<ImageRecord> records;
  TrainConfig config;
};

Fixture small_run(int ocr_regions = 1) {
  SynthConfig sc;
  sc.images = 24;
  sc.height = sc.width = 32;
  sc.classes = 8;
  sc.regions_per_image = 3;
  sc.ocr_regions_per_image = ocr_regions;
  sc.vocab_size = 8;
  sc.patch_size = 8;
  Fixture f;
  f.records = synth_generate(sc, 11).records;
  f.config.regions_per_image = 3;
  f.config.object_classes = 8;
  f.config.ocr_classes = ocr_regions ? 8 : 0;
  f.config.rho = 0.25;
  f.config.scale = 16;
  f.config.batch_size = 4;
  f.config.seed = 3;
  auto& e = f.config.encoder;
  e.layers = 2;
  e.region_layers = 1;
  e.heads = 2;
  e.dim = 16;
  e.patch = 8;
  e.height = e.width = 32;
  e.mlp_hidden = 32;
  return f;
}

std::vector<std::string> run_lines(const Fixture& f, TrainState& state, int steps) {
  std::vector<std::string> lines;
  train(f.records, state, f.config, steps, [&](const StepMetrics& m) { lines.push_back(m.to_json_line()); });
  return lines;
}

std::vector<Image> render_all(const RegionBatch& b) {
  std::vector<Image> images;
  for (const auto& r : b.records) images.push_back(render_synthetic(r));
  return images;
}

TokenSequence<float> tokens_from(const std::vector<std::vector<float>>& rows) {
  TokenSequence<float> t;
  t.patches = Matrix<float>(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.patches.row(i).begin());
  return t;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config defaults") {
  TrainConfig c;
  CHECK(c.regions_per_image == 10);
  CHECK(c.rho == 0.1);
  CHECK(c.margin == 0.3);
  CHECK(c.scale == 64.0);
  CHECK(c.lr == 0.001);
  CHECK(c.weight_decay == 0.2);
  CHECK(c.beta1 == 0.9);
  CHECK(c.beta2 == 0.999);
  CHECK(c.eps == 1e-8);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.regions_per_image = 0; });
  bad([](TrainConfig& c) { c.rho = 0; });
  bad([](TrainConfig& c) { c.object_classes = 5; });  // floor(5 * 0.1) = 0
  bad([](TrainConfig& c) { c.margin = 1; });
  bad([](TrainConfig& c) { c.scale = -1; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.shards = 0; });
  bad([](TrainConfig& c) { c.shards = 2000; });
  bad([](TrainConfig& c) { c.threads = 0; });
}

TEST_CASE("metrics line layout") {
  StepMetrics m{3, 1.5, 0.25, 2.0, 0.5, -0.125};
  CHECK(m.to_json_line() ==
        R"({"step":3,"object_loss":1.5,"ocr_loss":0.25,"grad_norm":2.0,"mean_pos_cos":0.5,"mean_neg_cos":-0.125})");
}

TEST_CASE("initial classifier rows are unit vectors") {
  const auto f = small_run();
  const auto s = TrainState::init(f.config, f.config.seed);
  CHECK(s.classifier.num_classes() == 16);
  CHECK(s.classifier.ocr_offset == 8);
  for (std::size_t k = 0; k < s.classifier.num_classes(); ++k)
    CHECK(std::abs(l2_norm<float>(s.classifier.centers.row(k)) - 1.0f) <= 1e-6f);
}

TEST_CASE("step batches depend only on the seed and step") {
  const auto f = small_run();
  const auto a = step_batch(f.records, f.config, 5), b = step_batch(f.records, f.config, 5);
  REQUIRE(a.records.size() == 4);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].image_id == b.records[i].image_id);
    CHECK(a.sampled[i].size() == 3);
  }
  const auto c = step_batch(f.records, f.config, 6);
  bool differs = false;
  for (std::size_t i = 0; i < 4; ++i) differs = differs || a.records[i].image_id != c.records[i].image_id;
  CHECK(differs);
}

TEST_CASE("zero learning rate leaves everything unchanged") {
  auto f = small_run();
  f.config.lr = 0;
  auto state = TrainState::init(f.config, f.config.seed);
  const auto before = state;
  const auto batch = step_batch(f.records, f.config, 0);
  const auto images = render_all(batch);
  const auto first = train_step(batch, images, state, f.config, 77);
  for (int i = 0; i < 3; ++i) {
    const auto m = train_step(batch, images, state, f.config, 77);
    CHECK(m.object_loss == first.object_loss);
    CHECK(m.ocr_loss == first.ocr_loss);
    CHECK(m.mean_pos_cos == first.mean_pos_cos);
  }
  CHECK(std::isfinite(first.object_loss));
  CHECK(first.grad_norm > 0);
  auto a = state.encoder.tensors();
  auto b = before.encoder.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  CHECK(state.classifier.centers == before.classifier.centers);
}

TEST_CASE("training is deterministic") {
  testing::TempDir dir("trainer_det");
  const auto f = small_run();
  auto s1 = TrainState::init(f.config, f.config.seed);
  auto s2 = TrainState::init(f.config, f.config.seed);
  const auto a = run_lines(f, s1, 6);
  const auto b = run_lines(f, s2, 6);
  CHECK(a == b);
  save_checkpoint(dir / "a.ricp", s1);
  save_checkpoint(dir / "b.ricp", s2);
  CHECK(testing::read_file(dir / "a.ricp") == testing::read_file(dir / "b.ricp"));
}

TEST_CASE("thread count does not change results") {
  auto f = small_run();
  auto s1 = TrainState::init(f.config, f.config.seed);
  const auto a = run_lines(f, s1, 4);
  f.config.threads = 3;
  auto s2 = TrainState::init(f.config, f.config.seed);
  const auto b = run_lines(f, s2, 4);
  CHECK(a == b);
  CHECK(s1.classifier.centers == s2.classifier.centers);
}

TEST_CASE("shard count does not change results beyond rounding") {
  auto f = small_run();
  auto s1 = TrainState::init(f.config, f.config.seed);
  const auto batch = step_batch(f.records, f.config, 0);
  const auto images = render_all(batch);
  const auto a = evaluate_batch(batch, images, s1.encoder.cast<double>(), ClassifierState<double>{s1.classifier.centers.cast<double>(), 0.3, 16, 8}, f.config, 9);
  f.config.shards = 4;
  const auto b = evaluate_batch(batch, images, s1.encoder.cast<double>(), ClassifierState<double>{s1.classifier.centers.cast<double>(), 0.3, 16, 8}, f.config, 9);
  CHECK(std::abs(a.loss - b.loss) <= 1e-12);
  CHECK(max_abs_diff(a.d_centers, b.d_centers) <= 1e-12);
}

TEST_CASE("resuming reproduces the uninterrupted run") {
  testing::TempDir dir("trainer_resume");
  const auto f = small_run();
  auto full = TrainState::init(f.config, f.config.seed);
  const auto all = run_lines(f, full, 20);

  auto part = TrainState::init(f.config, f.config.seed);
  auto lines = run_lines(f, part, 10);
  save_checkpoint(dir / "mid.ricp", part);
  auto resumed = load_checkpoint(dir / "mid.ricp");
  CHECK(resumed.step == 10);
  const auto rest = run_lines(f, resumed, 10);
  lines.insert(lines.end(), rest.begin(), rest.end());
  CHECK(lines == all);
  save_checkpoint(dir / "full.ricp", full);
  save_checkpoint(dir / "resumed.ricp", resumed);
  CHECK(testing::read_file(dir / "full.ricp") == testing::read_file(dir / "resumed.ricp"));
}

TEST_CASE("centers stay unit length after every step") {
  const auto f = small_run();
  auto s = TrainState::init(f.config, f.config.seed);
  train(f.records, s, f.config, 5, [&](const StepMetrics& m) {
    CHECK(std::isfinite(m.object_loss));
    CHECK(std::isfinite(m.ocr_loss));
    CHECK(std::isfinite(m.grad_norm));
    for (std::size_t k = 0; k < s.classifier.num_classes(); ++k)
      CHECK(std::abs(l2_norm<float>(s.classifier.centers.row(k)) - 1.0f) <= 1e-6f);
  });
  CHECK(s.step == 5);
  CHECK(s.adam.step == 5);
}

TEST_CASE("positive cosine rises on separable data") {
  auto f = small_run(0);
  f.config.lr = 3e-3;
  auto s = TrainState::init(f.config, f.config.seed);
  std::vector<double> pos;
  train(f.records, s, f.config, 60, [&](const StepMetrics& m) { pos.push_back(m.mean_pos_cos); });
  // Smoothed over 10 steps, each window stays within 0.02 of the best so far.
  double best = -2;
  for (std::size_t i = 9; i < pos.size(); ++i) {
    double avg = 0;
    for (std::size_t j = i - 9; j <= i; ++j) avg += pos[j] / 10;
    CHECK(avg >= best - 0.02);
    best = std::max(best, avg);
  }
  CHECK(pos.back() > pos.front());
}

TEST_CASE("a non-finite loss names the offending sample") {
  const auto f = small_run();
  auto s = TrainState::init(f.config, f.config.seed);
  s.encoder.ln_post_g.fill(std::numeric_limits<float>::quiet_NaN());
  const auto batch = step_batch(f.records, f.config, 0);
  try {
    train_step(batch, render_all(batch), s, f.config, 1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(batch.records[0].image_id) != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  testing::TempDir dir("trainer_ckpt");
  const auto f = small_run();
  auto s = TrainState::init(f.config, f.config.seed);
  train(f.records, s, f.config, 2);
  save_checkpoint(dir / "c.ricp", s);
  const auto back = load_checkpoint(dir / "c.ricp");
  auto a = s.encoder.tensors();
  auto b = back.encoder.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  CHECK(back.encoder.config == s.encoder.config);
  CHECK(back.classifier.centers == s.classifier.centers);
  CHECK(back.classifier.margin == s.classifier.margin);
  CHECK(back.classifier.scale == s.classifier.scale);
  CHECK(back.classifier.ocr_offset == s.classifier.ocr_offset);
  CHECK(back.adam.step == s.adam.step);
  CHECK(back.adam.m == s.adam.m);
  CHECK(back.adam.v == s.adam.v);
  CHECK(back.step == s.step);
  save_checkpoint(dir / "d.ricp", back);
  CHECK(testing::read_file(dir / "c.ricp") == testing::read_file(dir / "d.ricp"));
}

TEST_CASE("damaged checkpoints are rejected") {
  testing::TempDir dir("trainer_bad");
  const auto f = small_run();
  save_checkpoint(dir / "c.ricp", TrainState::init(f.config, 1));
  const auto bytes = testing::read_file(dir / "c.ricp");
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    testing::write_file(dir / "t.ricp", bytes.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(dir / "t.ricp"), FormatError);
  }
  testing::write_file(dir / "m.ricp", "XICP" + bytes.substr(4));
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ricp"), FormatError);
  auto v = bytes;
  v[4] = 9;  // version
  testing::write_file(dir / "v.ricp", v);
  CHECK_THROWS_AS(load_checkpoint(dir / "v.ricp"), FormatError);
  testing::write_file(dir / "x.ricp", bytes + "junk");
  CHECK_THROWS_AS(load_checkpoint(dir / "x.ricp"), FormatError);
  CHECK_THROWS(load_checkpoint(dir / "missing.ricp"));
}

TEST_CASE("token distance histogram examples") {
  const auto same = token_distance_histogram(tokens_from({{1, 2}, {1, 2}, {1, 2}}), 10);
  CHECK(same.counts[0] == 3);
  CHECK(same.mean == 0.0);
  CHECK(same.pairs == 3);

  const auto ortho = token_distance_histogram(tokens_from({{3, 0}, {0, 0.5f}}), 20);
  CHECK(ortho.pairs == 1);
  CHECK(ortho.mean == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
  CHECK(ortho.counts[14] == 1);  // 1.414 in [1.4, 1.5)

  Rng rng(4);
  std::vector<std::vector<float>> rows;
  for (int i = 0; i < 13; ++i) {
    std::vector<float> r(6);
    for (auto& x : r) x = static_cast<float>(rng.normal());
    rows.push_back(r);
  }
  const auto h = token_distance_histogram(tokens_from(rows), 7);
  std::size_t total = 0;
  for (auto c : h.counts) total += c;
  CHECK(total == 13 * 12 / 2);
  CHECK(h.pairs == total);

  CHECK_THROWS(token_distance_histogram(tokens_from({{1, 0}}), 5));
}

TEST_CASE("cross-class distance needs two classes") {
  auto f = small_run(0);
  auto s = TrainState::init(f.config, f.config.seed);
  auto rec = f.records[0];
  const auto out = encode(render_synthetic(rec), rec.regions, s.encoder);
  const auto d = cross_class_token_distance(out.tokens, rec);
  bool multi = false;
  for (const auto& r : rec.regions) multi = multi || r.object_label != rec.regions[0].object_label;
  CHECK(d.has_value() == multi);
  rec.regions.resize(1);
  CHECK_FALSE(cross_class_token_distance(out.tokens, rec).has_value());
}

}  // TEST_SUITE
