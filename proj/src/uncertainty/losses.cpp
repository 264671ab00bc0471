// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/uncertainty/losses.hpp"

#include <fmt/format.h>

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"

namespace mixcal::uncertainty {

namespace {

void check_lengths(std::size_t correct, std::size_t flu) {
  if (correct != flu) {
    throw ContractError(fmt::format("calibration_loss: {} labels for {} FLU values", correct, flu));
  }
  if (correct == 0) throw ContractError("calibration_loss: empty batch");
}

}  // namespace

Tensor calibration_loss(const std::vector<bool>& correct, const Tensor& flu) {
  check_lengths(correct.size(), flu.numel());
  std::vector<double> target(correct.begin(), correct.end());
  return ad::mean(ad::square(ad::sub(Tensor::from(flu.shape(), std::move(target)), flu)));
}

double calibration_loss(const std::vector<bool>& correct, std::span<const double> flu) {
  check_lengths(correct.size(), flu.size());
  double s = 0.0;
  for (std::size_t i = 0; i < flu.size(); ++i) {
    const double d = (correct[i] ? 1.0 : 0.0) - flu[i];
    s += d * d;
  }
  return s / static_cast<double>(flu.size());
}

Tensor load_balance_loss(const model::ForwardTrace& trace, double a) {
  if (!(a > 0.0)) throw ContractError(fmt::format("load_balance_loss: coefficient {} must be positive", a));
  if (trace.records.empty()) throw ContractError("load_balance_loss: trace has no routing records");
  Tensor total;
  for (const auto& rec : trace.records) {
    const Tensor& probs = rec.routing.probs;
    const std::size_t T = probs.rows(), K = probs.cols();
    std::vector<double> f(K, 0.0);
    for (auto e : ad::argmax_rows(probs)) f[e] += 1.0 / static_cast<double>(T);
    // mean_t sum_i F_i p_ti = sum_i F_i P_i
    const Tensor fp = ad::mean(ad::linear(probs, Tensor::from({1, K}, std::move(f))));
    const Tensor term = ad::scale(fp, a * static_cast<double>(K));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(trace.records.size()));
}

LossBreakdown total_loss(Tensor ce, Tensor load_balance, Tensor calibration, double gamma,
                         double beta) {
  if (gamma < 0.0 || beta < 0.0) {
    throw ContractError(fmt::format("total_loss: weights gamma={} beta={} must be >= 0", gamma, beta));
  }
  LossBreakdown out{std::move(ce), std::move(load_balance), std::move(calibration), {}, gamma, beta};
  out.total = ad::add(ad::add(out.ce, ad::scale(out.load_balance, gamma)), ad::scale(out.calibration, beta));
  return out;
}

double total_loss(double ce, double load_balance, double calibration, double gamma, double beta) {
  if (gamma < 0.0 || beta < 0.0) {
    throw ContractError(fmt::format("total_loss: weights gamma={} beta={} must be >= 0", gamma, beta));
  }
  return ce + gamma * load_balance + beta * calibration;
}

}  // namespace mixcal::uncertainty
