// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expected calibration error over M equal-width bins. Bin m covers
// (m/M, (m+1)/M]; bin 0 also takes confidence 0.

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"

namespace mixcal::uncertainty {

inline constexpr std::size_t kDefaultBins = 15;

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double acc = 0.0;   // 0 when empty
  double conf = 0.0;  // 0 when empty
};

struct CalibrationReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  std::vector<CalibrationBin> bins;
};

// Upper-edge-inclusive bin of a confidence in [0, 1].
std::size_t bin_index(double confidence, std::size_t num_bins);

// Throws ContractError for confidences outside [0, 1], mismatched lengths,
// zero bins or an empty set.
CalibrationReport expected_calibration_error(std::span<const double> confidence,
                                             const std::vector<bool>& correct,
                                             std::size_t num_bins = kDefaultBins);

// sum_m |B_m|/n * |acc_m - conf_m|; the report's ece is computed this way.
double ece_from_bins(std::span<const CalibrationBin> bins);

// Max softmax probability and argmax class of each row of logits [n x C].
struct Predictions {
  std::vector<std::size_t> label;
  std::vector<double> confidence;
};
Predictions predict(const ad::Tensor& logits);

// CSV with header bin_lo,bin_hi,count,acc,conf; reals printed round-trip exact.
std::string reliability_bins_csv(const CalibrationReport& report);
void write_reliability_bins(const std::filesystem::path& path, const CalibrationReport& report);

}  // namespace mixcal::uncertainty
