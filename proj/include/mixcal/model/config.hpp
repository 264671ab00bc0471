// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include <nlohmann/json_fwd.hpp>

namespace mixcal::model {

// Projections inside a block that may carry a mixture of LoRA experts.
enum class Sublayer : std::size_t { kQuery = 0, kKey, kValue, kOutput, kFfn };
inline constexpr std::size_t kNumSublayers = 5;
inline constexpr std::array<Sublayer, kNumSublayers> kAllSublayers = {
    Sublayer::kQuery, Sublayer::kKey, Sublayer::kValue, Sublayer::kOutput, Sublayer::kFfn};

std::string_view sublayer_name(Sublayer s);
Sublayer sublayer_from_name(std::string_view name);

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t hidden = 32;
  std::size_t heads = 1;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  // Extra multiplier on every LoRA delta; below 1 shrinks the residual
  // branch's sensitivity to its input.
  double lora_output_scale = 1.0;
  std::size_t vocab = 32;
  std::size_t seq_len = 16;
  std::size_t classes = 4;
  std::size_t ffn_mult = 2;
  std::array<bool, kNumSublayers> adapted = {true, true, true, true, true};
  double ln_eps = 1e-5;

  // Initialization.
  double embed_std = 1.0;
  double pos_std = 0.1;
  double router_std = 0.02;
  double head_std = 0.02;
  // B starts at zero unless this is positive.
  double lora_b_std = 0.0;
  // Steps of CE pre-training applied to the frozen base before adaptation.
  std::size_t pretrain_steps = 200;

  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
  std::size_t ffn_hidden() const { return ffn_mult * hidden; }
  std::size_t adapted_count() const;
  bool is_adapted(Sublayer s) const { return adapted[static_cast<std::size_t>(s)]; }

  // Throws ConfigError naming the first invalid field.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace mixcal::model
