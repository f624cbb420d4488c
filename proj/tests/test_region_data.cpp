// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "helpers.hpp"
#include "rice/binary_io.hpp"
#include "rice/region_data.hpp"

using namespace rice;

namespace {

std::vector<Region> numbered_regions(int n) {
  std::vector<Region> out;
  for (int i = 0; i < n; ++i) out.push_back(Region::object({i % 8, 0, i % 8 + 1, 1 + i / 8}, i));
  return out;
}

std::multiset<int> labels_of(const std::vector<SampledRegion>& s) {
  std::multiset<int> out;
  for (const auto& r : s) out.insert(*r.region.object_label);
  return out;
}

}  // namespace

TEST_SUITE("region_data") {

TEST_CASE("empty manifest parses to no records") {
  CHECK(parse_manifest_text("").empty());
  testing::TempDir dir("manifest");
  testing::write_file(dir / "m.jsonl", "");
  CHECK(parse_manifest(dir / "m.jsonl").empty());
}

TEST_CASE("single object region keeps its label") {
  const auto recs = parse_manifest_text(
      R"({"image_id": "a", "h": 32, "w": 32, "regions": [{"bbox": [0, 0, 16, 16], "kind": "object", "label": 7}]})");
  REQUIRE(recs.size() == 1);
  REQUIRE(recs[0].regions.size() == 1);
  CHECK(recs[0].image_id == "a");
  CHECK(recs[0].regions[0].kind == RegionKind::Object);
  CHECK(recs[0].regions[0].object_label == 7);
  CHECK(recs[0].regions[0].ocr_labels.empty());
}

TEST_CASE("bbox past the image width is a validation error on its line") {
  const std::string ok = R"({"image_id": "a", "h": 32, "w": 32, "regions": []})";
  const std::string bad =
      R"({"image_id": "b", "h": 32, "w": 32, "regions": [{"bbox": [0, 0, 33, 16], "kind": "object", "label": 1}]})";
  try {
    parse_manifest_text(ok + "\n" + bad + "\n");
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("invalid boxes are rejected, not clamped") {
  for (const char* box : {"[5, 0, 5, 4]", "[-1, 0, 4, 4]", "[0, 4, 4, 2]", "[0, 0, 4, 40]"}) {
    const std::string line = std::string(R"({"image_id": "a", "h": 32, "w": 32, "regions": [{"bbox": )") + box +
                             R"(, "kind": "object", "label": 0}]})";
    CHECK_THROWS_AS(parse_manifest_text(line), ValidationError);
  }
}

TEST_CASE("malformed lines report their line number") {
  const std::string good = R"({"image_id": "a", "h": 16, "w": 16, "regions": []})";
  for (const std::string& bad :
       {std::string("{not json"), std::string(R"({"image_id": "a", "h": 16, "regions": []})"),
        std::string(R"({"image_id": "a", "h": 16, "w": 16, "regions": [{"bbox": [0,0,1,1], "kind": "blob"}]})"),
        std::string(R"({"image_id": "a", "h": 16, "w": 16, "regions": [{"bbox": [0,0,1,1], "kind": "ocr"}]})"),
        std::string(
            R"({"image_id": "a", "h": 16, "w": 16, "regions": [{"bbox": [0,0,1,1], "kind": "ocr", "tokens": []}]})"),
        std::string(
            R"({"image_id": "a", "h": 16, "w": 16, "regions": [{"bbox": [0,0,1], "kind": "object", "label": 1}]})")}) {
    CAPTURE(bad);
    try {
      parse_manifest_text(good + "\n" + good + "\n" + bad);
      FAIL("expected an error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    } catch (const ValidationError& e) {
      CHECK(e.line() == 3);
    }
  }
}

TEST_CASE("kind and label fields must agree") {
  Region r = Region::object({0, 0, 4, 4}, 3);
  r.ocr_labels = {1};
  CHECK_THROWS(validate_region(r, 16, 16));
  Region o = Region::ocr({0, 0, 4, 4}, {1, 2});
  o.object_label = 1;
  CHECK_THROWS(validate_region(o, 16, 16));
  CHECK_NOTHROW(validate_region(Region::ocr({0, 0, 4, 4}, {1, 2}), 16, 16));
}

TEST_CASE("write then parse is the identity") {
  SynthConfig cfg;
  cfg.images = 12;
  cfg.ocr_regions_per_image = 1;
  const auto ds = synth_generate(cfg, 3);
  testing::TempDir dir("roundtrip");
  write_manifest(dir / "m.jsonl", ds.records);
  CHECK(parse_manifest(dir / "m.jsonl") == ds.records);
  // Records without optional fields survive too.
  std::vector<ImageRecord> plain{{"x", 16, 32, {Region::object({0, 0, 16, 16}, 2), Region::ocr({16, 0, 32, 8}, {4, 4})}, {}}};
  write_manifest(dir / "p.jsonl", plain);
  CHECK(parse_manifest(dir / "p.jsonl") == plain);
}

TEST_CASE("blank lines are skipped but still counted") {
  const std::string rec = R"({"image_id": "a", "h": 16, "w": 16, "regions": []})";
  CHECK(parse_manifest_text(rec + "\n\n" + rec + "\n").size() == 2);
  try {
    parse_manifest_text(rec + "\n\n{");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("sampling 10 of 15 regions gives 10 distinct regions") {
  const auto regions = numbered_regions(15);
  const auto s = balanced_sample(regions, 10, 42);
  REQUIRE(s.size() == 10);
  const auto labels = labels_of(s);
  CHECK(std::set<int>(labels.begin(), labels.end()).size() == 10);
  for (const auto& r : s) {
    CHECK_FALSE(r.duplicate);
    CHECK(regions[r.source_index] == r.region);
  }
}

TEST_CASE("sampling 10 from 4 regions keeps all originals") {
  const auto regions = numbered_regions(4);
  const auto s = balanced_sample(regions, 10, 42);
  REQUIRE(s.size() == 10);
  const auto labels = labels_of(s);
  for (int i = 0; i < 4; ++i) CHECK(labels.count(i) >= 1);
  CHECK(std::count_if(s.begin(), s.end(), [](const auto& r) { return r.duplicate; }) == 6);
}

TEST_CASE("sampling exactly N regions returns the same set") {
  const auto regions = numbered_regions(10);
  const auto labels = labels_of(balanced_sample(regions, 10, 5));
  CHECK(labels == std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("sampling with no regions fails") {
  CHECK_THROWS_WITH(balanced_sample({}, 3, 1), "no regions");
  CHECK_THROWS(balanced_sample(numbered_regions(3), 0, 1));
}

TEST_CASE("balanced_sample properties over random sizes") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int n_regions = 1 + static_cast<int>(rng.below(20));
    const std::size_t n = 1 + rng.below(15);
    const auto regions = numbered_regions(n_regions);
    const auto seed = rng.next_u64();
    const auto s = balanced_sample(regions, n, seed);
    REQUIRE(s.size() == n);
    CHECK(labels_of(s) == labels_of(balanced_sample(regions, n, seed)));
    for (const auto& r : s) CHECK(regions.at(r.source_index) == r.region);
    const auto labels = labels_of(s);
    if (static_cast<std::size_t>(n_regions) >= n) {
      CHECK(std::set<int>(labels.begin(), labels.end()).size() == n);
    } else {
      for (int i = 0; i < n_regions; ++i) CHECK(labels.count(i) >= 1);
    }
  }
}

TEST_CASE("sampling without replacement is uniform over regions") {
  const auto regions = numbered_regions(6);
  std::vector<int> hits(6, 0);
  const int draws = 6000;
  for (int t = 0; t < draws; ++t)
    for (const auto& r : balanced_sample(regions, 2, derive_seed(17, {static_cast<std::uint64_t>(t)})))
      ++hits[static_cast<std::size_t>(*r.region.object_label)];
  for (int h : hits) CHECK(std::abs(h - 2000) < 150);
}

TEST_CASE("make_batch skips empty images") {
  std::vector<ImageRecord> recs{{"a", 16, 16, numbered_regions(3), {}}, {"empty", 16, 16, {}, {}},
                                {"b", 16, 16, numbered_regions(1), {}}};
  const auto batch = make_batch(recs, 2, 9);
  REQUIRE(batch.records.size() == 2);
  CHECK(batch.records[0].image_id == "a");
  CHECK(batch.records[1].image_id == "b");
  for (const auto& s : batch.sampled) CHECK(s.size() == 2);
}

TEST_CASE("tokenize a single known token") {
  std::vector<std::string> tokens{"<unk>", "a", "b", "c", "d", "stop"};
  Vocabulary v(tokens);
  CHECK(tokenize_text("stop", v) == std::vector<int>{5});
}

TEST_CASE("tokenize two known words") {
  Vocabulary v = Vocabulary::from_map(
      {{"<unk>", 0}, {"a", 1}, {"b", 2}, {"c", 3}, {"d", 4}, {"stop", 5}, {"e", 6}, {"f", 7}, {"g", 8}, {"now", 9}});
  CHECK(tokenize_text("stop now", v) == std::vector<int>{5, 9});
  CHECK(tokenize_text("  stop\tnow\n", v) == std::vector<int>{5, 9});
}

TEST_CASE("tokenize falls back per character to UNK") {
  Vocabulary v({"<unk>", "s", "t", "stop"});
  CHECK(tokenize_text("stx", v) == std::vector<int>{1, 2, 0});
  CHECK(tokenize_text("é", v) == std::vector<int>{0});  // one UNK per code point
  CHECK(tokenize_text("   ", v) == std::vector<int>{0});
  CHECK_THROWS(tokenize_text("", v));
}

TEST_CASE("tokenize is deterministic and total") {
  Vocabulary v({"<unk>", "a", "ab", "b"});
  Rng rng(4);
  const std::string alphabet = "ab c\t";
  for (int t = 0; t < 300; ++t) {
    std::string s;
    const auto len = 1 + rng.below(12);
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng.below(alphabet.size())];
    const auto ids = tokenize_text(s, v);
    CHECK(ids.size() >= 1);
    CHECK(ids == tokenize_text(s, v));
    for (int id : ids) CHECK((id >= 0 && id < 4));
  }
}

TEST_CASE("vocabulary must be a bijection") {
  CHECK_THROWS(Vocabulary::from_map({{"<unk>", 0}, {"x", 2}}));
  CHECK_THROWS(Vocabulary::from_map({{"<unk>", 0}, {"x", 0}}));
  CHECK_THROWS(Vocabulary({"a", "a"}));
  CHECK_THROWS(Vocabulary(std::vector<std::string>{}));
}

TEST_CASE("minimal synthetic config gives distinct latent classes") {
  SynthConfig cfg;
  cfg.classes = 2;
  cfg.images = 1;
  cfg.regions_per_image = 2;
  const auto ds = synth_generate(cfg, 11);
  REQUIRE(ds.records.size() == 1);
  REQUIRE(ds.records[0].regions.size() == 2);
  CHECK(ds.records[0].regions[0].latent != ds.records[0].regions[1].latent);
  CHECK(ds.features.rows() == 2);
}

TEST_CASE("synthetic generation is byte-identical for a seed") {
  SynthConfig cfg;
  cfg.images = 20;
  cfg.ocr_regions_per_image = 1;
  testing::TempDir dir("synth");
  for (int run = 0; run < 2; ++run) {
    const auto ds = synth_generate(cfg, 5);
    write_manifest(dir / ("m" + std::to_string(run)), ds.records);
    write_features(dir / ("f" + std::to_string(run)), ds.features);
  }
  CHECK(testing::read_file(dir / "m0") == testing::read_file(dir / "m1"));
  CHECK(testing::read_file(dir / "f0") == testing::read_file(dir / "f1"));
  const auto other = synth_generate(cfg, 6);
  CHECK_FALSE(other.records == synth_generate(cfg, 5).records);
}

TEST_CASE("synthetic class feature means are well separated") {
  const auto ds = synth_generate(SynthConfig{}, 2024);  // 16 classes, 1000 regions
  std::size_t total = 0;
  for (const auto& r : ds.records) total += r.regions.size();
  REQUIRE(total == 1000);
  const std::size_t g = 16, d = ds.features.cols();
  Matrix<double> means(g, d);
  std::size_t q = 0;
  for (const auto& r : ds.records)
    for (const auto& reg : r.regions) {
      auto m = means.row(static_cast<std::size_t>(*reg.latent));
      for (std::size_t c = 0; c < d; ++c) m[c] += ds.features(q, c);
      ++q;
    }
  normalize_rows(means);
  double sep = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t b = a + 1; b < g; ++b, ++pairs) sep += 1.0 - dot<double>(means.row(a), means.row(b));
  CHECK(sep / pairs >= 0.2);
}

TEST_CASE("synthetic features and pixels are well formed") {
  SynthConfig cfg;
  cfg.images = 10;
  cfg.ocr_regions_per_image = 2;
  const auto ds = synth_generate(cfg, 8);
  for (std::size_t i = 0; i < ds.features.rows(); ++i)
    CHECK(l2_norm<float>(ds.features.row(i)) == doctest::Approx(1.0).epsilon(1e-5));
  for (const auto& rec : ds.records) {
    for (const auto& r : rec.regions) {
      CHECK_NOTHROW(validate_region(r, rec.width, rec.height));
      CHECK(r.bbox.width() >= cfg.patch_size);
      if (r.kind == RegionKind::Ocr)
        for (int t : r.ocr_labels) CHECK((t >= 1 && t < cfg.vocab_size));
    }
    const auto img = render_synthetic(rec);
    CHECK(img.pixels.rows() == static_cast<std::size_t>(rec.height * rec.width));
    for (float x : img.pixels.storage()) CHECK((x >= 0.0f && x <= 1.0f));
  }
}

TEST_CASE("rendering needs a render seed") {
  ImageRecord rec{"a", 16, 16, {Region::object({0, 0, 16, 16}, 0)}, {}};
  CHECK_THROWS_AS(render_synthetic(rec), ConfigError);
}

TEST_CASE("synthetic config is validated") {
  SynthConfig cfg;
  cfg.classes = 1;
  CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
  cfg = SynthConfig{};
  cfg.regions_per_image = 17;  // more regions than layout slots or classes
  CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
}

TEST_CASE("feature file round trip and truncation") {
  Rng rng(1);
  const auto f = testing::random_matrix<float>(7, 5, rng);
  testing::TempDir dir("features");
  write_features(dir / "f.ricf", f);
  CHECK(read_features(dir / "f.ricf") == f);
  auto bytes = testing::read_file(dir / "f.ricf");
  testing::write_file(dir / "t.ricf", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_features(dir / "t.ricf"), FormatError);
  testing::write_file(dir / "m.ricf", "XXXX" + bytes.substr(4));
  CHECK_THROWS_AS(read_features(dir / "m.ricf"), FormatError);
}

}  // TEST_SUITE
