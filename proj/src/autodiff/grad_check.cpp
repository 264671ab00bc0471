// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/autodiff/grad_check.hpp"

#include <cmath>

#include <fmt/format.h>

#include "mixcal/errors.hpp"

namespace mixcal::ad {

GradCheckResult grad_check_detailed(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                    double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) {
    throw ContractError(fmt::format("grad_check: step {} outside [1e-7, 1e-3]", step));
  }
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor root = f();
  const double f0 = root.item();
  if (f().item() != f0) throw ContractError("grad_check: objective is not deterministic");
  root.backward();

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const auto analytic = p.grad();
    auto values = p.mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f().item();
      values[i] = saved - step;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err =
          std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
      if (!std::isfinite(err)) throw NumericError("grad_check: non-finite objective");
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double tensor_err = std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2) + 1e-12);
    if (tensor_err > result.max_tensor_rel_error) {
      result.max_tensor_rel_error = tensor_err;
      result.worst_tensor = pi;
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace mixcal::ad
