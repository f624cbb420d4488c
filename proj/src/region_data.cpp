// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include "rice/region_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rice/binary_io.hpp"
#include "rice/random.hpp"

namespace rice {

using nlohmann::json;

void validate_region(const Region& r, int width, int height, std::size_t line) {
  const auto& b = r.bbox;
  if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= width && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= height)) {
    std::ostringstream os;
    os << "bbox [" << b.x0 << "," << b.y0 << "," << b.x1 << "," << b.y1
       << "] outside " << width << "x" << height << " image";
    throw ValidationError(line, os.str());
  }
  if (r.kind == RegionKind::Object) {
    if (!r.object_label || *r.object_label < 0)
      throw ValidationError(line, "object region needs a non-negative label");
    if (!r.ocr_labels.empty()) throw ValidationError(line, "object region carries OCR tokens");
  } else {
    if (r.ocr_labels.empty()) throw ValidationError(line, "OCR region needs tokens");
    if (r.object_label) throw ValidationError(line, "OCR region carries an object label");
    for (int t : r.ocr_labels)
      if (t < 0) throw ValidationError(line, "negative OCR token id");
  }
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

ImageRecord record_from_json(const json& j, std::size_t line) {
  ImageRecord rec;
  try {
    rec.image_id = j.at("image_id").get<std::string>();
    rec.height = j.at("h").get<int>();
    rec.width = j.at("w").get<int>();
    if (j.contains("render_seed")) rec.render_seed = j.at("render_seed").get<std::uint64_t>();
    for (const auto& jr : j.at("regions")) {
      Region r;
      const auto& bb = jr.at("bbox");
      if (!bb.is_array() || bb.size() != 4) throw ParseError(line, "bbox must have 4 entries");
      r.bbox = {bb[0].get<int>(), bb[1].get<int>(), bb[2].get<int>(), bb[3].get<int>()};
      const auto kind = jr.at("kind").get<std::string>();
      if (kind == "object") {
        r.kind = RegionKind::Object;
        r.object_label = jr.at("label").get<int>();
      } else if (kind == "ocr") {
        r.kind = RegionKind::Ocr;
        r.ocr_labels = jr.at("tokens").get<std::vector<int>>();
      } else {
        throw ParseError(line, "unknown region kind '" + kind + "'");
      }
      if (jr.contains("latent")) r.latent = jr.at("latent").get<int>();
      rec.regions.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ParseError(line, e.what());
  }
  if (rec.height <= 0 || rec.width <= 0) throw ValidationError(line, "non-positive image size");
  for (const auto& r : rec.regions) validate_region(r, rec.width, rec.height, line);
  return rec;
}

json record_to_json(const ImageRecord& rec) {
  json j;
  j["image_id"] = rec.image_id;
  j["h"] = rec.height;
  j["w"] = rec.width;
  if (rec.render_seed) j["render_seed"] = *rec.render_seed;
  json regions = json::array();
  for (const auto& r : rec.regions) {
    json jr;
    jr["bbox"] = {r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1};
    if (r.kind == RegionKind::Object) {
      jr["kind"] = "object";
      jr["label"] = r.object_label.value_or(0);
    } else {
      jr["kind"] = "ocr";
      jr["tokens"] = r.ocr_labels;
    }
    if (r.latent) jr["latent"] = *r.latent;
    regions.push_back(std::move(jr));
  }
  j["regions"] = std::move(regions);
  return j;
}

}  // namespace

std::vector<ImageRecord> parse_manifest_text(std::string_view text) {
  std::vector<ImageRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "record must be a JSON object");
    out.push_back(record_from_json(j, line_no));
  }
  return out;
}

std::vector<ImageRecord> parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest_text(ss.str());
}

std::string manifest_line(const ImageRecord& record) { return record_to_json(record).dump(); }

void write_manifest(const std::filesystem::path& path, const std::vector<ImageRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& r : records) out << manifest_line(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<SampledRegion> balanced_sample(const std::vector<Region>& regions, std::size_t n,
                                           std::uint64_t seed) {
  if (regions.empty()) throw std::invalid_argument("no regions");
  if (n == 0) throw std::invalid_argument("balanced_sample: N must be >= 1");
  Rng rng(seed);
  std::vector<std::size_t> idx(regions.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<SampledRegion> out;
  out.reserve(n);
  if (regions.size() >= n) {
    // Partial Fisher-Yates: the first n slots are a uniform n-subset.
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
      out.push_back({regions[idx[i]], idx[i], false});
    }
    return out;
  }
  for (auto i : idx) out.push_back({regions[i], i, false});
  while (out.size() < n) {
    const auto j = rng.below(regions.size());
    out.push_back({regions[j], j, true});
  }
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

RegionBatch make_batch(std::vector<ImageRecord> records, std::size_t n, std::uint64_t seed) {
  RegionBatch batch;
  batch.seed = seed;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].regions.empty()) {
      std::cerr << "warning: skipping image '" << records[i].image_id << "' with no regions\n";
      continue;
    }
    batch.sampled.push_back(balanced_sample(records[i].regions, n, derive_seed(seed, {i})));
    batch.records.push_back(std::move(records[i]));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Tokenization

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty()) throw std::invalid_argument("vocabulary must not be empty");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::from_map(const std::unordered_map<std::string, int>& mapping) {
  std::vector<std::string> tokens(mapping.size());
  std::vector<bool> seen(mapping.size(), false);
  for (const auto& [tok, id] : mapping) {
    if (id < 0 || static_cast<std::size_t>(id) >= mapping.size() || seen[id])
      throw std::invalid_argument("vocabulary ids must be a bijection onto [0, V)");
    seen[id] = true;
    tokens[id] = tok;
  }
  return Vocabulary(std::move(tokens));
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Length of the UTF-8 sequence starting with byte c (1 for invalid lead bytes).
std::size_t utf8_length(unsigned char c) {
  if (c >= 0xF0 && c < 0xF8) return 4;
  if (c >= 0xE0) return c < 0xF0 ? 3 : 1;
  if (c >= 0xC0) return 2;
  return 1;
}

}  // namespace

std::vector<int> tokenize_text(std::string_view text, const Vocabulary& vocab) {
  if (vocab.size() == 0) throw std::invalid_argument("empty vocabulary");
  if (text.empty()) throw std::invalid_argument("empty OCR text");
  std::vector<int> ids;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j == i) break;
    const auto word = text.substr(i, j - i);
    if (auto id = vocab.find(word)) {
      ids.push_back(*id);
    } else {
      for (std::size_t k = 0; k < word.size();) {
        const auto len = std::min(utf8_length(static_cast<unsigned char>(word[k])), word.size() - k);
        ids.push_back(vocab.find(word.substr(k, len)).value_or(kUnkToken));
        k += len;
      }
    }
    i = j;
  }
  // Whitespace-only text still carries a region; represent it by UNK.
  if (ids.empty()) ids.push_back(kUnkToken);
  return ids;
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthConfig::validate() const {
  if (classes < 2) throw ConfigError("synth: need at least 2 classes");
  if (images < 0) throw ConfigError("synth: negative image count");
  if (height <= 0 || width <= 0 || patch_size <= 0)
    throw ConfigError("synth: image and patch sizes must be positive");
  if (height % patch_size || width % patch_size)
    throw ConfigError("synth: image size must be divisible by the patch size");
  if (regions_per_image < 0 || ocr_regions_per_image < 0 ||
      regions_per_image + ocr_regions_per_image < 1)
    throw ConfigError("synth: need at least one region per image");
  if (ocr_regions_per_image > 0 && (vocab_size < 2 || max_ocr_tokens < 1))
    throw ConfigError("synth: OCR regions need vocab_size >= 2 and max_ocr_tokens >= 1");
  if (feature_dim < 2) throw ConfigError("synth: feature_dim must be >= 2");
  if (feature_noise < 0 || pixel_noise < 0) throw ConfigError("synth: negative noise");
}

namespace {

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

struct Slot {
  int x0, y0, x1, y1;
};

// Splits the patch grid into n disjoint cell-aligned slots.
std::vector<Slot> layout_slots(const SynthConfig& c, int n) {
  const int cols = c.width / c.patch_size, rows = c.height / c.patch_size;
  int sx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  int sy = (n + sx - 1) / sx;
  if (sx > cols || sy > rows) throw ConfigError("synth: too many regions for the patch grid");
  std::vector<Slot> slots;
  for (int k = 0; k < n; ++k) {
    const int gx = k % sx, gy = k / sx;
    const int cx0 = gx * cols / sx, cx1 = (gx + 1) * cols / sx;
    const int cy0 = gy * rows / sy, cy1 = (gy + 1) * rows / sy;
    slots.push_back({cx0 * c.patch_size, cy0 * c.patch_size, cx1 * c.patch_size, cy1 * c.patch_size});
  }
  return slots;
}

// Random box inside a slot with both edges at least one patch long.
BBox random_box(const Slot& s, int p, Rng& rng) {
  auto span = [&](int lo, int hi, int& a, int& b) {
    const int len = p + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo - p + 1)));
    a = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo - len + 1)));
    b = a + len;
  };
  BBox b;
  span(s.x0, s.x1, b.x0, b.x1);
  span(s.y0, s.y1, b.y0, b.y1);
  return b;
}

std::vector<float> unit_gaussian(Rng& rng, int dim) {
  std::vector<float> v(dim);
  double n2 = 0;
  std::vector<double> tmp(dim);
  for (int i = 0; i < dim; ++i) {
    tmp[i] = rng.normal();
    n2 += tmp[i] * tmp[i];
  }
  const double n = std::sqrt(n2);
  for (int i = 0; i < dim; ++i) v[i] = static_cast<float>(tmp[i] / n);
  return v;
}

}  // namespace

std::array<float, 3> class_color(int latent) {
  // 8 hues × 2 brightness × 2 saturation levels before colors repeat.
  const int hue = latent % 8;
  const int level = (latent / 8) % 2;
  const int sat = (latent / 16) % 2;
  return hsv_to_rgb(hue / 8.0, sat ? 0.45 : 0.9, level ? 0.5 : 0.95);
}

std::array<float, 3> token_color(int token) {
  return hsv_to_rgb(std::fmod(token * 0.6180339887498949, 1.0), 0.7, 0.75);
}

Vocabulary synth_vocabulary(int vocab_size) {
  std::vector<std::string> tokens{"<unk>"};
  for (int i = 1; i < vocab_size; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocabulary(std::move(tokens));
}

SynthDataset synth_generate(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, {0x5e}));
  SynthDataset ds;
  const int dim = config.feature_dim;
  ds.class_means = Matrix<float>(config.classes, dim);
  for (int g = 0; g < config.classes; ++g) {
    auto v = unit_gaussian(rng, dim);
    std::copy(v.begin(), v.end(), ds.class_means.row(g).begin());
  }

  const int per_image = config.regions_per_image + config.ocr_regions_per_image;
  const auto slots = layout_slots(config, per_image);
  std::vector<float> feats;
  for (int i = 0; i < config.images; ++i) {
    ImageRecord rec;
    rec.image_id = "synth_" + std::to_string(i);
    rec.height = config.height;
    rec.width = config.width;
    rec.render_seed = derive_seed(seed, {0x1a, static_cast<std::uint64_t>(i)});
    // Distinct latent classes within an image while the class count allows it.
    std::vector<int> classes(config.classes);
    std::iota(classes.begin(), classes.end(), 0);
    for (int k = 0; k < per_image; ++k) {
      const Slot& slot = slots[k];
      BBox box = random_box(slot, config.patch_size, rng);
      Region r;
      std::vector<float> f(dim);
      if (k < config.regions_per_image) {
        int g;
        if (k < config.classes) {
          const auto j = k + rng.below(static_cast<std::uint64_t>(config.classes - k));
          std::swap(classes[k], classes[j]);
          g = classes[k];
        } else {
          g = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.classes)));
        }
        r = Region::object(box, g);
        r.latent = g;
        double n2 = 0;
        for (int d = 0; d < dim; ++d) {
          const double x = ds.class_means(g, d) + config.feature_noise * rng.normal();
          f[d] = static_cast<float>(x);
          n2 += x * x;
        }
        const double n = std::sqrt(n2);
        for (auto& x : f) x = static_cast<float>(x / n);
      } else {
        const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_ocr_tokens)));
        std::vector<int> tokens;
        for (int t = 0; t < count; ++t)
          tokens.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.vocab_size - 1))));
        r = Region::ocr(box, std::move(tokens));
        f = unit_gaussian(rng, dim);
      }
      rec.regions.push_back(std::move(r));
      feats.insert(feats.end(), f.begin(), f.end());
    }
    ds.records.push_back(std::move(rec));
  }
  ds.features = Matrix<float>(feats.size() / dim, dim);
  std::copy(feats.begin(), feats.end(), ds.features.data());
  return ds;
}

Image render_synthetic(const ImageRecord& record, double pixel_noise) {
  if (!record.render_seed) throw ConfigError("record '" + record.image_id + "' has no render seed");
  Image img;
  img.height = record.height;
  img.width = record.width;
  img.channels = 3;
  img.pixels = Matrix<float>(static_cast<std::size_t>(img.height) * img.width, 3, 0.1f);
  for (const auto& r : record.regions) {
    const auto& b = r.bbox;
    if (r.kind == RegionKind::Object) {
      const auto color = class_color(r.latent.value_or(r.object_label.value_or(0)));
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
          for (int c = 0; c < 3; ++c) img.pixels(static_cast<std::size_t>(y) * img.width + x, c) = color[c];
    } else {
      // One vertical stripe per token.
      const int n = static_cast<int>(r.ocr_labels.size());
      for (int x = b.x0; x < b.x1; ++x) {
        const int t = std::min(n - 1, (x - b.x0) * n / b.width());
        const auto color = token_color(r.ocr_labels[t]);
        for (int y = b.y0; y < b.y1; ++y)
          for (int c = 0; c < 3; ++c) img.pixels(static_cast<std::size_t>(y) * img.width + x, c) = color[c];
      }
    }
  }
  Rng rng(*record.render_seed);
  for (auto& v : img.pixels.storage()) {
    const double x = v + pixel_noise * rng.normal();
    v = static_cast<float>(std::clamp(x, 0.0, 1.0));
  }
  return img;
}

// ---------------------------------------------------------------------------
// Feature file

void write_features(const std::filesystem::path& path, const Matrix<float>& features) {
  BinaryWriter w(path);
  w.magic("RICF");
  w.u32(static_cast<std::uint32_t>(features.rows()));
  w.u32(static_cast<std::uint32_t>(features.cols()));
  w.f32s(features.storage());
  w.close();
}

Matrix<float> read_features(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("RICF");
  const auto count = r.u32();
  const auto dim = r.u32();
  Matrix<float> m(count, dim);
  r.f32s(m.storage());
  r.expect_end();
  return m;
}

}  // namespace rice
