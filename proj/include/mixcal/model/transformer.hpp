// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"
#include "mixcal/model/config.hpp"
#include "mixcal/model/mixlora.hpp"

namespace mixcal::model {

// Several token sequences packed back to back.
struct TokenBatch {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> lengths;

  static TokenBatch single(std::span<const std::size_t> tokens);
  static TokenBatch from(const std::vector<std::vector<std::size_t>>& sequences);
  std::size_t size() const { return lengths.size(); }
  std::size_t total_tokens() const { return tokens.size(); }
};

struct RoutingRecord {
  std::size_t layer = 0;
  Sublayer sublayer = Sublayer::kQuery;
  Routing routing;  // rows are the packed tokens of the batch
};

// Plain-value routing of one router for one token.
struct RoutingDecision {
  std::vector<double> full_probs;
  std::vector<std::size_t> kept_indices;
  std::vector<double> kept_weights;
  double kept_mass() const;
};

struct ForwardTrace {
  std::size_t num_layers = 0;
  std::vector<std::size_t> lengths;
  // Ordered by layer, then sublayer (q, k, v, o, ffn among adapted ones).
  std::vector<RoutingRecord> records;
  Tensor logits;  // [batch x classes]
  // Output of the last block before the final norm, [tokens x hidden].
  Tensor final_hidden;

  std::size_t num_examples() const { return lengths.size(); }
  std::size_t row_offset(std::size_t example) const;
  RoutingDecision decision(std::size_t record, std::size_t example, std::size_t token) const;
  // Routing decisions held for one example: records x tokens.
  std::size_t decision_count(std::size_t example) const;
};

// Pinned routing for selected routers, keyed by (layer, sublayer).
using RoutingOverrides = std::map<std::pair<std::size_t, Sublayer>, RoutingOverride>;

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

class TransformerBlock {
 public:
  LayerNormParams ln1, ln2;
  MixLoraLinear q, k, v, o;
  MixLoraFfn ffn;

  // Pre-norm causal self-attention and feed-forward, each with a residual
  // add. Appends one record per adapted sublayer.
  Tensor forward(const Tensor& h, std::span<const std::size_t> lengths,
                 const ForwardOptions& opts, double ln_eps, std::size_t layer,
                 std::vector<RoutingRecord>* records,
                 const RoutingOverrides* overrides = nullptr) const;

  MixLoraLinear& projection(Sublayer s);
  const MixLoraLinear& projection(Sublayer s) const;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;  // shares storage with the model
  bool trainable = false;
  bool weight_decay = false;
};

class MixLoraModel {
 public:
  MixLoraModel() = default;
  MixLoraModel(ModelConfig config, Tensor embed, Tensor pos, std::vector<TransformerBlock> blocks,
               LayerNormParams final_ln, Tensor head_weight, Tensor head_bias);

  // Embedding, blocks, final layer norm and a linear head on each sequence's
  // last token. Throws IndexError for tokens outside the vocabulary.
  ForwardTrace forward(const TokenBatch& batch, const ForwardOptions& opts = {},
                       const RoutingOverrides* overrides = nullptr) const;

  // Trainable entries are LoRA factors, routers and the head; decay applies
  // to LoRA factors and routers only.
  std::vector<NamedParameter> parameters() const;
  std::map<std::string, std::vector<double>> state() const;
  // Copies values by name; every parameter must be present with its size.
  void load_state(const std::map<std::string, std::vector<double>>& state);
  MixLoraModel clone() const;

  // Total LoRA parameters: sum over adapted matrices and experts of r (in + out).
  std::size_t adapter_parameter_count() const;

  const ModelConfig& config() const { return config_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }
  const Tensor& embedding() const { return embed_; }
  const Tensor& positions() const { return pos_; }
  const LayerNormParams& final_norm() const { return final_ln_; }
  Tensor& head_weight() { return head_w_; }
  Tensor& head_bias() { return head_b_; }
  const Tensor& head_weight() const { return head_w_; }
  const Tensor& head_bias() const { return head_b_; }

 private:
  ModelConfig config_;
  Tensor embed_;  // [vocab x d]
  Tensor pos_;    // [seq_len x d]
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_ln_;
  Tensor head_w_;  // [classes x d]
  Tensor head_b_;  // [classes]
};

// Random initialization, deterministic in `seed`. Base weights are
// N(0, 1/n_in), LoRA A is N(0, 1/n_in), LoRA B is zero unless
// config.lora_b_std > 0, routers are N(0, router_std^2).
MixLoraModel init_model(const ModelConfig& config, std::uint64_t seed);

}  // namespace mixcal::model
