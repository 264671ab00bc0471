// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"
#include "mixcal/model/transformer.hpp"

namespace mixcal::uncertainty {

using ad::Tensor;

inline constexpr double kDefaultBalanceCoefficient = 1e-2;

// mean_i (1{correct_i} - flu_i)^2. Correctness enters as a constant; the
// gradient reaches the routers through flu only.
Tensor calibration_loss(const std::vector<bool>& correct, const Tensor& flu);
double calibration_loss(const std::vector<bool>& correct, std::span<const double> flu);

// a * K * sum_i F_i P_i for every routed sublayer in the trace, averaged over
// sublayers. F_i is the share of tokens whose top expert is i, P_i the mean
// router probability of expert i.
Tensor load_balance_loss(const model::ForwardTrace& trace,
                         double a = kDefaultBalanceCoefficient);

struct LossBreakdown {
  Tensor ce;
  Tensor load_balance;
  Tensor calibration;
  Tensor total;
  double gamma = 1.0;
  double beta = 1.0;
};

// ce + gamma * load_balance + beta * calibration. Throws ContractError for a
// negative weight.
LossBreakdown total_loss(Tensor ce, Tensor load_balance, Tensor calibration, double gamma,
                         double beta);
double total_loss(double ce, double load_balance, double calibration, double gamma, double beta);

}  // namespace mixcal::uncertainty
