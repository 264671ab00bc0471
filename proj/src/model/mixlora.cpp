// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/model/mixlora.hpp"

#include <fmt/format.h>

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"

namespace mixcal::model {

using namespace mixcal::ad;

Tensor adapter_dropout(const Tensor& x, const ForwardOptions& opts) {
  if (!opts.training || opts.dropout <= 0.0) return x;
  if (opts.rng == nullptr) throw ContractError("dropout requires a random generator");
  std::bernoulli_distribution keep(1.0 - opts.dropout);
  const double inv = 1.0 / (1.0 - opts.dropout);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = keep(*opts.rng) ? inv : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

FrozenLinear::FrozenLinear(Tensor weight) : weight_(std::move(weight)) {
  if (weight_.dim() != 2) throw DimensionError("FrozenLinear: weight must be a matrix");
  weight_.set_requires_grad(false);
}

Tensor FrozenLinear::forward(const Tensor& x) const { return linear(x, weight_); }

LoraExpert::LoraExpert(Tensor a, Tensor b, double scale)
    : a_(std::move(a)), b_(std::move(b)), scale_(scale) {
  if (a_.dim() != 2 || b_.dim() != 2 || b_.shape()[1] != a_.shape()[0]) {
    throw DimensionError(fmt::format("LoraExpert: A {} and B {} do not compose",
                                     shape_str(a_.shape()), shape_str(b_.shape())));
  }
}

Tensor LoraExpert::delta(const Tensor& x) const {
  return ad::scale(linear(linear(x, a_), b_), scale_);
}

TopKRouter::TopKRouter(Tensor weight, std::size_t k) : weight_(std::move(weight)), k_(k) {
  if (weight_.dim() != 2) throw DimensionError("TopKRouter: weight must be a matrix");
  if (k_ == 0 || k_ > weight_.shape()[0]) {
    throw ConfigError(fmt::format("TopKRouter: k={} with {} experts", k_, weight_.shape()[0]));
  }
}

Routing TopKRouter::route(const Tensor& h, const RoutingOverride* override_) const {
  Routing r;
  r.top_k = k_;
  r.probs = softmax(linear(h, weight_));
  const std::size_t n = r.probs.rows();
  if (override_ != nullptr) {
    if (override_->kept_indices.size() != n * k_ || override_->offsets.numel() != n * k_) {
      throw DimensionError(fmt::format("routing override sized for {} entries, need {}",
                                       override_->kept_indices.size(), n * k_));
    }
    r.kept_indices = override_->kept_indices;
  } else {
    r.kept_indices = topk_rows(r.probs, k_);
  }
  std::vector<std::size_t> rows(n * k_);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i / k_;
  Tensor kept = reshape(gather_elements(r.probs, rows, r.kept_indices), {n, k_});
  if (override_ != nullptr) kept = add(kept, reshape(override_->offsets, {n, k_}));
  r.kept_weights = kept;
  r.kept_mass = sum_rows(kept);
  return r;
}

MixLoraLinear::MixLoraLinear(FrozenLinear base, std::vector<LoraExpert> experts,
                             TopKRouter router)
    : base_(std::move(base)), experts_(std::move(experts)), router_(std::move(router)) {
  if (!experts_.empty() && experts_.size() != router_.num_experts()) {
    throw ConfigError(fmt::format("MixLoraLinear: {} experts but router scores {}",
                                  experts_.size(), router_.num_experts()));
  }
}

Tensor MixLoraLinear::lora_forward(std::size_t expert, const Tensor& h) const {
  if (expert >= experts_.size()) {
    throw IndexError(fmt::format("expert {} of {}", expert, experts_.size()));
  }
  return add(base_.forward(h), experts_[expert].delta(h));
}

namespace {

// Row and kept-slot positions that selected each expert.
struct ExpertGroups {
  std::vector<std::vector<std::size_t>> rows;
  std::vector<std::vector<std::size_t>> slots;
};

ExpertGroups group_by_expert(const Routing& r) {
  ExpertGroups g;
  g.rows.resize(r.num_experts());
  g.slots.resize(r.num_experts());
  for (std::size_t i = 0; i < r.kept_indices.size(); ++i) {
    const auto e = r.kept_indices[i];
    g.rows[e].push_back(i / r.top_k);
    g.slots[e].push_back(i % r.top_k);
  }
  return g;
}

}  // namespace

Tensor MixLoraLinear::forward(const Tensor& h, const ForwardOptions& opts, Routing* routing,
                              const RoutingOverride* override_) const {
  if (experts_.empty()) return base_.forward(h);
  Routing r = router_.route(h, override_);
  const std::size_t n = h.rows();
  Tensor out = scale_rows(base_.forward(h), r.kept_mass);
  const Tensor hd = adapter_dropout(h, opts);
  const auto groups = group_by_expert(r);
  for (std::size_t e = 0; e < experts_.size(); ++e) {
    if (groups.rows[e].empty()) continue;
    const Tensor delta = experts_[e].delta(gather_rows(hd, groups.rows[e]));
    const Tensor w = gather_elements(r.kept_weights, groups.rows[e], groups.slots[e]);
    out = add(out, scatter_rows(scale_rows(delta, w), groups.rows[e], n));
  }
  if (routing != nullptr) *routing = std::move(r);
  return out;
}

MixLoraFfn::MixLoraFfn(FrozenLinear up, FrozenLinear down, std::vector<LoraExpert> up_experts,
                       std::vector<LoraExpert> down_experts, std::optional<TopKRouter> router)
    : up_(std::move(up)),
      down_(std::move(down)),
      up_experts_(std::move(up_experts)),
      down_experts_(std::move(down_experts)),
      router_(std::move(router)) {
  const std::size_t k = router_ ? router_->num_experts() : 0;
  if (up_experts_.size() != k || down_experts_.size() != k) {
    throw ConfigError(fmt::format("MixLoraFfn: {}/{} experts for a router over {}",
                                  up_experts_.size(), down_experts_.size(), k));
  }
}

Tensor MixLoraFfn::expert_rows(std::size_t expert, const Tensor& h, const Tensor& up_base,
                               const ForwardOptions& opts) const {
  const Tensor u = add(up_base, up_experts_[expert].delta(adapter_dropout(h, opts)));
  const Tensor act = gelu(u);
  return add(down_.forward(act), down_experts_[expert].delta(adapter_dropout(act, opts)));
}

Tensor MixLoraFfn::expert_forward(std::size_t expert, const Tensor& h) const {
  if (!adapted()) return down_.forward(gelu(up_.forward(h)));
  if (expert >= up_experts_.size()) {
    throw IndexError(fmt::format("expert {} of {}", expert, up_experts_.size()));
  }
  return expert_rows(expert, h, up_.forward(h), ForwardOptions{});
}

Tensor MixLoraFfn::forward(const Tensor& h, const ForwardOptions& opts, Routing* routing,
                           const RoutingOverride* override_) const {
  if (!adapted()) return down_.forward(gelu(up_.forward(h)));
  Routing r = router_->route(h, override_);
  const std::size_t n = h.rows();
  const Tensor up_base = up_.forward(h);
  const auto groups = group_by_expert(r);
  Tensor out;
  for (std::size_t e = 0; e < up_experts_.size(); ++e) {
    if (groups.rows[e].empty()) continue;
    const Tensor y = expert_rows(e, gather_rows(h, groups.rows[e]),
                                 gather_rows(up_base, groups.rows[e]), opts);
    const Tensor w = gather_elements(r.kept_weights, groups.rows[e], groups.slots[e]);
    const Tensor part = scatter_rows(scale_rows(y, w), groups.rows[e], n);
    out = out.defined() ? add(out, part) : part;
  }
  if (routing != nullptr) *routing = std::move(r);
  return out;
}

}  // namespace mixcal::model
