// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/uncertainty/calibration.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"

namespace mixcal::uncertainty {

namespace {

double edge(std::size_t i, std::size_t m) { return static_cast<double>(i) / static_cast<double>(m); }

}  // namespace

std::size_t bin_index(double c, std::size_t m) {
  if (m == 0) throw ContractError("bin_index: zero bins");
  if (!(c >= 0.0 && c <= 1.0)) throw ContractError(fmt::format("confidence {} outside [0, 1]", c));
  if (c == 0.0) return 0;
  const double guess = std::ceil(c * static_cast<double>(m)) - 1.0;
  std::size_t i = guess < 0.0 ? 0 : std::min(static_cast<std::size_t>(guess), m - 1);
  // c * m can round across an edge; settle against the edges themselves.
  while (i > 0 && c <= edge(i, m)) --i;
  while (i + 1 < m && c > edge(i + 1, m)) ++i;
  return i;
}

CalibrationReport expected_calibration_error(std::span<const double> confidence,
                                             const std::vector<bool>& correct,
                                             std::size_t num_bins) {
  if (num_bins == 0) throw ContractError("expected_calibration_error: zero bins");
  if (confidence.size() != correct.size()) {
    throw ContractError(fmt::format("expected_calibration_error: {} confidences for {} labels",
                                    confidence.size(), correct.size()));
  }
  if (confidence.empty()) throw ContractError("expected_calibration_error: empty set");

  CalibrationReport rep;
  rep.n = confidence.size();
  rep.bins.resize(num_bins);
  std::vector<double> hits(num_bins, 0.0), conf(num_bins, 0.0);
  std::size_t total_hits = 0;
  for (std::size_t i = 0; i < rep.n; ++i) {
    const auto b = bin_index(confidence[i], num_bins);
    ++rep.bins[b].count;
    hits[b] += correct[i] ? 1.0 : 0.0;
    conf[b] += confidence[i];
    total_hits += correct[i];
  }
  for (std::size_t b = 0; b < num_bins; ++b) {
    auto& bin = rep.bins[b];
    bin.lo = edge(b, num_bins);
    bin.hi = edge(b + 1, num_bins);
    if (bin.count > 0) {
      bin.acc = hits[b] / static_cast<double>(bin.count);
      bin.conf = conf[b] / static_cast<double>(bin.count);
    }
  }
  rep.accuracy = static_cast<double>(total_hits) / static_cast<double>(rep.n);
  rep.ece = ece_from_bins(rep.bins);
  return rep;
}

double ece_from_bins(std::span<const CalibrationBin> bins) {
  std::size_t n = 0;
  for (const auto& b : bins) n += b.count;
  if (n == 0) return 0.0;
  double ece = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    ece += static_cast<double>(b.count) / static_cast<double>(n) * std::abs(b.acc - b.conf);
  }
  return ece;
}

Predictions predict(const ad::Tensor& logits) {
  const auto probs = ad::softmax(logits.detach());
  Predictions p;
  p.label = ad::argmax_rows(probs);
  const std::size_t c = probs.cols();
  for (std::size_t r = 0; r < p.label.size(); ++r) p.confidence.push_back(probs.data()[r * c + p.label[r]]);
  return p;
}

std::string reliability_bins_csv(const CalibrationReport& report) {
  std::string out = "bin_lo,bin_hi,count,acc,conf\n";
  for (const auto& b : report.bins) {
    out += fmt::format("{},{},{},{},{}\n", b.lo, b.hi, b.count, b.acc, b.conf);
  }
  return out;
}

void write_reliability_bins(const std::filesystem::path& path, const CalibrationReport& report) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  f << reliability_bins_csv(report);
}

}  // namespace mixcal::uncertainty
