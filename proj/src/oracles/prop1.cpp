// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/oracles/prop1.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "mixcal/errors.hpp"

namespace mixcal::oracles {

CalibrationMinimizer calibration_minimizer_oracle(double p, double step) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError(fmt::format("p = {} is not a probability", p));
  if (!(step > 0.0 && step <= 1.0)) throw ContractError(fmt::format("grid step {} out of range", step));
  const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
  CalibrationMinimizer best{p, 0.0, p};
  for (std::size_t i = 0; i <= n; ++i) {
    const double u = std::min(1.0, static_cast<double>(i) * step);
    const double risk = p * (1.0 - u) * (1.0 - u) + (1.0 - p) * u * u;
    if (risk < best.risk) best = {p, u, risk};
  }
  return best;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError(fmt::format("spearman on {} vs {} values", a.size(), b.size()));
  if (a.size() < 2) throw DimensionError("spearman needs at least two values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

Prop1Report empirical_prop1_check(const model::MixLoraModel& model, const data::Dataset& split) {
  Prop1Report out;
  out.regimes = harness::evaluate(model, split).regimes;
  std::vector<double> flu, acc;
  for (const auto& r : out.regimes) {
    flu.push_back(r.mean_flu);
    acc.push_back(r.accuracy);
  }
  out.spearman = spearman(flu, acc);
  return out;
}

}  // namespace mixcal::oracles
