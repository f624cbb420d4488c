// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient checks and independent reference evaluators.
// Everything here runs at f64 (references at long double) on small shapes.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rice/encoder.hpp"
#include "rice/loss.hpp"

namespace rice {

/// Deliberate defects for exercising the checker itself. MarginSign flips
/// the margin seen by the loss references.
enum class Fault { None, MarginSign };

/// max|a − n| / max(‖a‖∞, ‖n‖∞); 0 when both are zero.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// Direct evaluation of the object loss from cosines, at long double.
long double reference_object_loss(std::span<const double> embedding, std::span<const double> positive,
                                  const std::vector<std::vector<double>>& negatives, double margin, double scale);

/// Direct evaluation of the OCR loss, at long double.
long double reference_ocr_loss(std::span<const double> embedding, const std::vector<std::vector<double>>& positives,
                               const std::vector<std::vector<double>>& negatives, double margin, double scale);

/// Attention of one query over an explicit list of tokens: no mask, every
/// token participates. Used with the visible tokens sliced out of a sequence.
Matrix<double> dense_attention_oracle(std::span<const double> query, const Matrix<double>& tokens,
                                      const AttentionWeights<double>& weights);

struct CheckReport {
  std::string component;
  double value = 0;      // worst error observed
  double tolerance = 0;
  int trials = 0;
  double seconds = 0;
  bool passed() const { return value <= tolerance; }
};

/// Components understood by grad_check: encoder, object_loss, ocr_loss,
/// region_attention, end_to_end.
const std::vector<std::string>& grad_check_components();

/// Worst relative error between analytic gradients and central differences
/// over `trials` random cases. Throws std::invalid_argument on an unknown
/// component.
double grad_check(const std::string& component, int trials, std::uint64_t seed, Fault fault = Fault::None);

/// Worst absolute difference between region_attention and the slice-and-attend
/// oracle over `configs` random configurations (L ≤ 8, N_p ≤ 64, D ≤ 32).
double mask_oracle_check(int configs, std::uint64_t seed);

/// Default trial counts and tolerances for every suite, plus "mask_oracle".
std::vector<std::string> check_suites();
CheckReport run_check(const std::string& suite, std::uint64_t seed, Fault fault = Fault::None);

}  // namespace rice
