// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale training loop: region batches → encoder → normalized region
// embeddings → object/OCR losses against the (sharded) classifier →
// decoupled-weight-decay Adam. Also checkpoints and token diagnostics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rice/encoder.hpp"
#include "rice/loss.hpp"
#include "rice/region_data.hpp"

namespace rice {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class NegativeScope { PerImage, PerRegion };

struct TrainConfig {
  int regions_per_image = 10;  // N
  int object_classes = 1024;   // K
  int ocr_classes = 0;         // OCR vocabulary size V (0: no OCR head)
  double rho = 0.1;
  double margin = 0.3;
  double scale = 64.0;
  double lr = 1e-3;
  double weight_decay = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 16;
  int steps = 200;
  std::uint64_t seed = 0;
  double lambda_ocr = 1.0;
  int shards = 1;  // W
  int threads = 1;
  NegativeScope negatives = NegativeScope::PerImage;
  bool dedup_resamples = false;
  EncoderConfig encoder;

  void validate() const;
  std::size_t total_classes() const {
    return static_cast<std::size_t>(object_classes) + static_cast<std::size_t>(ocr_classes);
  }
};

struct StepMetrics {
  std::int64_t step = 0;
  double object_loss = 0;
  double ocr_loss = 0;
  double grad_norm = 0;
  double mean_pos_cos = 0;
  double mean_neg_cos = 0;

  std::string to_json_line() const;
};

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Matrix<float>> m;
  std::map<std::string, Matrix<float>> v;
};

struct TrainState {
  EncoderParams<float> encoder;
  ClassifierState<float> classifier;
  AdamState adam;
  std::int64_t step = 0;  // completed training steps

  /// Fresh parameters; classifier rows are random unit vectors.
  static TrainState init(const TrainConfig& config, std::uint64_t seed);
};

template <typename T>
struct BatchEvaluation {
  T loss = 0;  // weighted total over the batch
  double object_loss = 0;  // mean over object regions
  double ocr_loss = 0;     // mean over OCR regions
  double mean_pos_cos = 0;
  double mean_neg_cos = 0;
  EncoderParams<T> d_encoder;
  Matrix<T> d_centers;  // dense K_total × D
};

/// Forward (and optionally backward) pass of the training objective on one
/// batch: encode, normalize, object/OCR losses with negatives drawn from
/// `seed`. Gradients are reduced over images in index order.
template <typename T>
BatchEvaluation<T> evaluate_batch(const RegionBatch& batch, const std::vector<Image>& images,
                                  const EncoderParams<T>& encoder, const ClassifierState<T>& classifier,
                                  const TrainConfig& config, std::uint64_t seed, bool backward = true);

/// One forward/backward/update cycle on an already-sampled batch. Throws
/// NumericError (naming the offending image and region) on a non-finite loss.
StepMetrics train_step(const RegionBatch& batch, const std::vector<Image>& images, TrainState& state,
                       const TrainConfig& config, std::uint64_t seed);

/// Image indices and sampled regions used at a given step of a run.
RegionBatch step_batch(const std::vector<ImageRecord>& records, const TrainConfig& config, std::int64_t step);

/// Runs steps [state.step, state.step + steps); the batch and negatives of
/// step t depend only on (config.seed, t), so resuming from a checkpoint
/// reproduces the uninterrupted run.
void train(const std::vector<ImageRecord>& records, TrainState& state, const TrainConfig& config, int steps,
           const std::function<void(const StepMetrics&)>& on_step = {});

/// Unit-normalized rows (the embeddings the losses see).
template <typename T>
Matrix<T> normalized(const Matrix<T>& m);

// ---------------------------------------------------------------------------
// Diagnostics

struct DistanceHistogram {
  std::vector<std::size_t> counts;  // uniform bins over [0, 2]
  double mean = 0;
  std::size_t pairs = 0;
};

/// Pairwise Euclidean distances between L2-normalized patch tokens.
DistanceHistogram token_distance_histogram(const TokenSequence<float>& tokens, int bins);

/// Mean distance between normalized patch tokens whose centers fall inside
/// regions of different latent classes (patches outside every region are
/// ignored). Returns nullopt when fewer than two classes are present.
std::optional<double> cross_class_token_distance(const TokenSequence<float>& tokens, const ImageRecord& record);

struct RegionAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Nearest classifier center (among object classes) vs. the region's label,
/// over every object region of every record.
RegionAccuracy nearest_center_accuracy(const std::vector<ImageRecord>& records, const TrainState& state);

// ---------------------------------------------------------------------------
// Checkpoints ("RICP")

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace rice
