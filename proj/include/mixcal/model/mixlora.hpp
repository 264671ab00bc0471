// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// LoRA experts over frozen projections, top-k routing and the mixture layer.
//
// All layers work on row batches: an input [n x d] holds n token states and
// every token is routed on its own. The mixture keeps the raw softmax values
// of the top-k experts without renormalizing them, so a layer's output is
// scaled by its kept mass:
//
//   mix(h) = sum_{e in topk(h)} p_e(h) * (W h + s * B_e A_e h)

#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"
#include "mixcal/model/config.hpp"

namespace mixcal::model {

using ad::Tensor;

// Routing outcome of one router over a row batch.
struct Routing {
  Tensor probs;                          // [n x K] full softmax
  std::vector<std::size_t> kept_indices;  // [n x k], largest first
  Tensor kept_weights;                   // [n x k] raw softmax values of kept experts
  Tensor kept_mass;                      // [n] row sums of kept_weights
  std::size_t top_k = 0;

  std::size_t rows() const { return probs.rows(); }
  std::size_t num_experts() const { return probs.cols(); }
};

// Additive offsets on kept router outputs with the kept set pinned, used to
// perturb a forward pass in mixture-weight space.
struct RoutingOverride {
  std::vector<std::size_t> kept_indices;  // [n x k]
  Tensor offsets;                         // [n * k]
};

struct ForwardOptions {
  bool training = false;
  // Dropout on adapter inputs; ignored unless training.
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

class FrozenLinear {
 public:
  FrozenLinear() = default;
  explicit FrozenLinear(Tensor weight);
  Tensor forward(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  std::size_t in_features() const { return weight_.shape()[1]; }
  std::size_t out_features() const { return weight_.shape()[0]; }

 private:
  Tensor weight_;
};

class LoraExpert {
 public:
  LoraExpert() = default;
  LoraExpert(Tensor a, Tensor b, double scale);
  // scale * B (A x), without the base projection.
  Tensor delta(const Tensor& x) const;
  Tensor& a() { return a_; }
  Tensor& b() { return b_; }
  const Tensor& a() const { return a_; }
  const Tensor& b() const { return b_; }
  std::size_t rank() const { return a_.shape()[0]; }
  double scale() const { return scale_; }
  std::size_t parameter_count() const { return a_.numel() + b_.numel(); }

 private:
  Tensor a_;  // [rank x in]
  Tensor b_;  // [out x rank]
  double scale_ = 1.0;
};

class TopKRouter {
 public:
  TopKRouter() = default;
  TopKRouter(Tensor weight, std::size_t k);
  Routing route(const Tensor& h, const RoutingOverride* override_ = nullptr) const;
  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  std::size_t k() const { return k_; }
  std::size_t num_experts() const { return weight_.shape()[0]; }

 private:
  Tensor weight_;  // [K x d]
  std::size_t k_ = 0;
};

// Frozen linear projection with a routed mixture of LoRA experts.
class MixLoraLinear {
 public:
  MixLoraLinear() = default;
  MixLoraLinear(FrozenLinear base, std::vector<LoraExpert> experts, TopKRouter router);

  bool adapted() const { return !experts_.empty(); }
  // base(h) + scale * B_k A_k h for a single expert.
  Tensor lora_forward(std::size_t expert, const Tensor& h) const;
  // Mixture over each row's kept experts.
  Tensor forward(const Tensor& h, const ForwardOptions& opts, Routing* routing,
                 const RoutingOverride* override_ = nullptr) const;

  const FrozenLinear& base() const { return base_; }
  std::vector<LoraExpert>& experts() { return experts_; }
  const std::vector<LoraExpert>& experts() const { return experts_; }
  TopKRouter& router() { return router_; }
  const TopKRouter& router() const { return router_; }

 private:
  FrozenLinear base_;
  std::vector<LoraExpert> experts_;
  TopKRouter router_;
};

// Position-wise feed-forward: down(gelu(up(h))). With experts, expert e
// adapts both projections and the routed mixture combines whole FFN outputs.
class MixLoraFfn {
 public:
  MixLoraFfn() = default;
  MixLoraFfn(FrozenLinear up, FrozenLinear down, std::vector<LoraExpert> up_experts,
             std::vector<LoraExpert> down_experts, std::optional<TopKRouter> router);

  bool adapted() const { return router_.has_value(); }
  // Output of a single expert (or the plain FFN when not adapted).
  Tensor expert_forward(std::size_t expert, const Tensor& h) const;
  Tensor forward(const Tensor& h, const ForwardOptions& opts, Routing* routing,
                 const RoutingOverride* override_ = nullptr) const;

  const FrozenLinear& up() const { return up_; }
  const FrozenLinear& down() const { return down_; }
  std::vector<LoraExpert>& up_experts() { return up_experts_; }
  std::vector<LoraExpert>& down_experts() { return down_experts_; }
  const std::vector<LoraExpert>& up_experts() const { return up_experts_; }
  const std::vector<LoraExpert>& down_experts() const { return down_experts_; }
  TopKRouter& router() { return *router_; }
  const TopKRouter& router() const { return *router_; }

 private:
  Tensor expert_rows(std::size_t expert, const Tensor& h, const Tensor& up_base,
                     const ForwardOptions& opts) const;

  FrozenLinear up_, down_;
  std::vector<LoraExpert> up_experts_, down_experts_;
  std::optional<TopKRouter> router_;
};

// Multiplies by a fresh inverted-dropout mask when training with rate > 0.
Tensor adapter_dropout(const Tensor& x, const ForwardOptions& opts);

}  // namespace mixcal::model
