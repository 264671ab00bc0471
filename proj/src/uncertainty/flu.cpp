// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/uncertainty/flu.hpp"

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"

namespace mixcal::uncertainty {

FluRecord compute_flu(const model::ForwardTrace& trace) {
  if (trace.records.empty()) throw ContractError("compute_flu: trace has no routing records");
  const std::size_t n_records = trace.records.size();
  const std::size_t batch = trace.num_examples();

  Tensor mass = trace.records[0].routing.kept_mass;
  for (std::size_t r = 1; r < n_records; ++r) mass = ad::add(mass, trace.records[r].routing.kept_mass);
  mass = ad::scale(mass, 1.0 / static_cast<double>(n_records));

  FluRecord out;
  out.flu = ad::segment_mean(mass, trace.lengths);
  out.per_layer.assign(batch, std::vector<double>(trace.num_layers, 0.0));
  std::vector<std::size_t> per_layer_records(trace.num_layers, 0);
  for (const auto& rec : trace.records) {
    ++per_layer_records.at(rec.layer);
    const auto km = rec.routing.kept_mass.data();
    for (std::size_t b = 0, row = 0; b < batch; ++b) {
      double s = 0.0;
      for (std::size_t t = 0; t < trace.lengths[b]; ++t) s += km[row++];
      out.per_layer[b][rec.layer] += s / static_cast<double>(trace.lengths[b]);
    }
  }
  for (auto& layers : out.per_layer) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (per_layer_records[l] > 0) layers[l] /= static_cast<double>(per_layer_records[l]);
    }
  }
  return out;
}

}  // namespace mixcal::uncertainty
