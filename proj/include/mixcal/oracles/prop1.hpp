// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mixcal/data/task.hpp"
#include "mixcal/harness/train.hpp"
#include "mixcal/model/transformer.hpp"

namespace mixcal::oracles {

inline constexpr double kPropGridStep = 1e-4;

struct CalibrationMinimizer {
  double p = 0.0;
  double u_star = 0.0;
  double risk = 0.0;  // p (1 - u*)^2 + (1 - p) u*^2
};

// Dense grid search of u in [0, 1] for the expected calibration risk of a
// prediction that is correct with probability p. ContractError for p outside
// [0, 1].
CalibrationMinimizer calibration_minimizer_oracle(double p, double step = kPropGridStep);

struct Prop1Report {
  std::vector<harness::RegimeStats> regimes;
  double spearman = 0.0;  // between per-regime mean FLU and accuracy
};

Prop1Report empirical_prop1_check(const model::MixLoraModel& model, const data::Dataset& split);

// Spearman rank correlation with average ranks for ties; 0 when either side
// is constant. DimensionError for unequal or short inputs.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace mixcal::oracles
