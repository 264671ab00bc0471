// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Functional-level uncertainty: how much router mass the kept experts carry,
// averaged over layers, adapted sublayers and token positions. Values lie in
// [k/K, 1]; a token whose routers concentrate on the kept experts scores 1.

#pragma once

#include <cstddef>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"
#include "mixcal/model/transformer.hpp"

namespace mixcal::uncertainty {

using ad::Tensor;

struct FluRecord {
  Tensor flu;  // [batch], differentiable through the routers
  // [batch][layer] kept mass averaged over that layer's sublayers and tokens.
  std::vector<std::vector<double>> per_layer;

  std::size_t size() const { return per_layer.size(); }
  double value(std::size_t example) const { return flu.at(example); }
};

// Throws ContractError for a trace without routing records.
FluRecord compute_flu(const model::ForwardTrace& trace);

}  // namespace mixcal::uncertainty
