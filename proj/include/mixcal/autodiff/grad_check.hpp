// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"

namespace mixcal::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  // Same measure on whole tensors, ||a - n|| / (||a|| + ||n||). Robust to
  // single entries whose gradient sits below the finite-difference noise.
  double max_tensor_rel_error = 0.0;
  std::size_t worst_tensor = 0;
};

// Compares reverse-mode gradients of a scalar objective against central
// differences. `f` must rebuild its graph from `params` on every call.
// Relative error per entry is |a - n| / (|a| + |n| + 1e-12).
//
// Throws ContractError when `step` is outside [1e-7, 1e-3] or when two
// evaluations at the same point disagree.
GradCheckResult grad_check_detailed(const std::function<Tensor()>& f,
                                    std::vector<Tensor> params, double step = 1e-5);

inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double step = 1e-5) {
  return grad_check_detailed(f, std::move(params), step).max_rel_error;
}

}  // namespace mixcal::ad
