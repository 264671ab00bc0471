// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// First-order structure of the model in mixture-weight space.
//
// The probe pins every perturbed router's kept experts, adds eps * d to the
// kept weights (d_j = u_j * w_j with u_j uniform in [-1, 1], so the offset is
// relative to the weight it moves) and measures the change of the last
// token's final hidden state h^{L+1}. The linear prediction is the sum over
// perturbed weights of Delta alpha times the derivative of h^{L+1} with
// respect to that weight at the unperturbed point. Expert parameters do not
// move. The residual between the two is second order in eps.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mixcal/model/transformer.hpp"

namespace mixcal::oracles {

struct ProbeOptions {
  std::vector<double> eps = {1e-1, 1e-2, 1e-3, 1e-4};
  std::uint64_t direction_seed = 0;
  // Routers to perturb; empty means all of them.
  std::set<std::pair<std::size_t, model::Sublayer>> targets;
};

struct PerturbationProbeResult {
  std::vector<double> eps;
  std::vector<double> residual_norm;  // || Delta f - linear term ||
  std::vector<double> linear_norm;    // || linear term ||
  std::vector<double> delta_norm;     // || Delta f ||

  // Least-squares slope of log residual against log eps over rungs with a
  // positive eps and residual.
  double loglog_slope() const;
};

// ContractError when eps is not strictly decreasing, is negative, or a
// perturbed kept mass leaves (0, 1].
PerturbationProbeResult perturbation_probe(const model::MixLoraModel& model,
                                           const std::vector<std::size_t>& tokens,
                                           const ProbeOptions& options = {});

// CSV with header eps,residual_norm,linear_norm.
std::string probe_csv(const PerturbationProbeResult& r);

}  // namespace mixcal::oracles
