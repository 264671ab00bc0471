// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"

namespace mixcal::harness {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with weight decay applied directly to the parameters (not through the
// gradient), on the parameters flagged for decay.
class AdamW {
 public:
  AdamW(std::vector<ad::Tensor> params, std::vector<bool> decay, AdamWConfig config);

  // One update from the parameters' accumulated gradients.
  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<ad::Tensor> params_;
  std::vector<bool> decay_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mixcal::harness
