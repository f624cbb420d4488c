// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Region-annotated image records: manifest I/O, balanced region sampling,
// OCR text tokenization and the synthetic dataset generator.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rice/tensor.hpp"

namespace rice {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive-exclusive pixel bounds
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

enum class RegionKind { Object, Ocr };

struct Region {
  BBox bbox;
  RegionKind kind = RegionKind::Object;
  std::optional<int> object_label;
  std::vector<int> ocr_labels;
  // Generator ground truth; not used for training.
  std::optional<int> latent;

  static Region object(BBox b, int label) {
    Region r;
    r.bbox = b;
    r.kind = RegionKind::Object;
    r.object_label = label;
    return r;
  }
  static Region ocr(BBox b, std::vector<int> tokens) {
    Region r;
    r.bbox = b;
    r.kind = RegionKind::Ocr;
    r.ocr_labels = std::move(tokens);
    return r;
  }

  friend bool operator==(const Region&, const Region&) = default;
};

/// Throws ValidationError (tagged with `line`) if the region breaks its
/// geometry or label invariants for a w×h image.
void validate_region(const Region& r, int width, int height, std::size_t line = 0);

/// H×W×C pixels in [0, 1], stored as an (H·W)×C matrix, row index y·W + x.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  Matrix<float> pixels;

  float at(int y, int x, int c) const {
    return pixels(static_cast<std::size_t>(y) * width + x, c);
  }
};

struct ImageRecord {
  std::string image_id;
  int height = 0;
  int width = 0;
  std::vector<Region> regions;
  // Seed of the synthetic generator that can re-render this image; absent
  // for externally sourced records.
  std::optional<std::uint64_t> render_seed;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct SampledRegion {
  Region region;
  std::size_t source_index = 0;  // index into the record's region list
  bool duplicate = false;        // a resample added to reach N
};

struct RegionBatch {
  std::vector<ImageRecord> records;
  std::vector<std::vector<SampledRegion>> sampled;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Manifest

std::vector<ImageRecord> parse_manifest(const std::filesystem::path& path);
std::vector<ImageRecord> parse_manifest_text(std::string_view text);
std::string manifest_line(const ImageRecord& record);
void write_manifest(const std::filesystem::path& path, const std::vector<ImageRecord>& records);

// ---------------------------------------------------------------------------
// Sampling

/// Draws exactly n regions. With at least n regions available this is a
/// uniform draw without replacement; otherwise every region is kept once and
/// the remainder is filled by uniform resampling (flagged as duplicates).
/// Output order is shuffled so duplicates are not always last.
std::vector<SampledRegion> balanced_sample(const std::vector<Region>& regions, std::size_t n,
                                           std::uint64_t seed);

/// Samples every record; records without regions are skipped with a warning
/// on stderr.
RegionBatch make_batch(std::vector<ImageRecord> records, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Tokenization

inline constexpr int kUnkToken = 0;

class Vocabulary {
 public:
  /// Token at index i receives id i; index 0 is the reserved unknown token.
  explicit Vocabulary(std::vector<std::string> tokens);
  /// Builds from an explicit mapping; ids must form a bijection onto [0, V)
  /// and id 0 must be present (it is the unknown token).
  static Vocabulary from_map(const std::unordered_map<std::string, int>& mapping);

  std::size_t size() const { return tokens_.size(); }
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Whitespace segmentation; words missing from the vocabulary fall back to
/// per-character lookup, and characters that are also missing map to UNK.
std::vector<int> tokenize_text(std::string_view text, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Synthetic data

inline constexpr double kDefaultPixelNoise = 0.04;

struct SynthConfig {
  int images = 250;
  int height = 64;
  int width = 64;
  int classes = 16;            // latent object classes G
  int regions_per_image = 4;   // object regions
  int ocr_regions_per_image = 0;
  int vocab_size = 32;         // OCR vocabulary incl. UNK
  int max_ocr_tokens = 4;      // M_max
  int feature_dim = 32;
  double feature_noise = 0.05; // per-coordinate std before renormalization
  double pixel_noise = kDefaultPixelNoise;
  int patch_size = 16;         // bboxes are laid out on this grid

  void validate() const;
};

struct SynthDataset {
  std::vector<ImageRecord> records;
  Matrix<float> features;        // one row per region, manifest traversal order
  Matrix<float> class_means;     // G × feature_dim, unit rows
};

/// Records carry the latent class as their object label (and in `latent`);
/// clustering later replaces labels with pseudo-labels.
SynthDataset synth_generate(const SynthConfig& config, std::uint64_t seed);

/// Renders a synthetic record's pixels (3 channels) from its regions and
/// render seed. Throws ConfigError when the record has no render seed.
Image render_synthetic(const ImageRecord& record, double pixel_noise = kDefaultPixelNoise);

/// RGB color keyed to a latent object class.
std::array<float, 3> class_color(int latent);
/// RGB color keyed to an OCR token id.
std::array<float, 3> token_color(int token);

Vocabulary synth_vocabulary(int vocab_size);

// ---------------------------------------------------------------------------
// Feature file ("RICF")

void write_features(const std::filesystem::path& path, const Matrix<float>& features);
Matrix<float> read_features(const std::filesystem::path& path);

}  // namespace rice
