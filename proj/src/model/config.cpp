// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/model/config.hpp"

#include <algorithm>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mixcal/errors.hpp"

namespace mixcal::model {

namespace {
constexpr std::array<std::string_view, kNumSublayers> kNames = {"q", "k", "v", "o", "ffn"};
}

std::string_view sublayer_name(Sublayer s) { return kNames[static_cast<std::size_t>(s)]; }

Sublayer sublayer_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumSublayers; ++i) {
    if (kNames[i] == name) return static_cast<Sublayer>(i);
  }
  throw ConfigError(fmt::format("unknown sublayer '{}' (expected q, k, v, o or ffn)", name));
}

std::size_t ModelConfig::adapted_count() const {
  return static_cast<std::size_t>(std::count(adapted.begin(), adapted.end(), true));
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(fmt::format("model.{} must be positive", name));
  };
  positive(layers, "layers");
  positive(hidden, "hidden");
  positive(num_experts, "num_experts");
  positive(top_k, "top_k");
  positive(lora_rank, "lora_rank");
  positive(vocab, "vocab");
  positive(seq_len, "seq_len");
  positive(classes, "classes");
  positive(ffn_mult, "ffn_mult");
  if (heads != 1) throw ConfigError("model.heads must be 1");
  if (hidden < 2) throw ConfigError("model.hidden must be at least 2");
  if (classes < 2) throw ConfigError("model.classes must be at least 2");
  if (top_k > num_experts) {
    throw ConfigError(fmt::format("model.top_k ({}) exceeds model.num_experts ({})", top_k,
                                  num_experts));
  }
  if (lora_rank >= hidden) {
    throw ConfigError(fmt::format("model.lora_rank ({}) must be below model.hidden ({})",
                                  lora_rank, hidden));
  }
  if (!(lora_alpha > 0.0)) throw ConfigError("model.lora_alpha must be positive");
  if (!(lora_output_scale >= 0.0)) throw ConfigError("model.lora_output_scale must be >= 0");
  if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be positive");
  if (adapted_count() == 0) throw ConfigError("model.adapted must name at least one sublayer");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  std::vector<std::string> adapted;
  for (auto s : kAllSublayers) {
    if (c.is_adapted(s)) adapted.emplace_back(sublayer_name(s));
  }
  j = nlohmann::json{{"layers", c.layers},
                     {"hidden", c.hidden},
                     {"heads", c.heads},
                     {"num_experts", c.num_experts},
                     {"top_k", c.top_k},
                     {"lora_rank", c.lora_rank},
                     {"lora_alpha", c.lora_alpha},
                     {"lora_output_scale", c.lora_output_scale},
                     {"vocab", c.vocab},
                     {"seq_len", c.seq_len},
                     {"classes", c.classes},
                     {"ffn_mult", c.ffn_mult},
                     {"adapted", adapted},
                     {"ln_eps", c.ln_eps},
                     {"embed_std", c.embed_std},
                     {"pos_std", c.pos_std},
                     {"router_std", c.router_std},
                     {"head_std", c.head_std},
                     {"lora_b_std", c.lora_b_std},
                     {"pretrain_steps", c.pretrain_steps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> kKnown = {
      "layers",   "hidden",    "heads",     "num_experts", "top_k",      "lora_rank",
      "lora_alpha", "lora_output_scale", "vocab", "seq_len", "classes", "ffn_mult",
      "adapted",  "ln_eps",    "embed_std", "pos_std",     "router_std", "head_std",
      "lora_b_std", "pretrain_steps"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      throw ConfigError(fmt::format("unknown field model.{}", key));
    }
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("layers", c.layers);
  get("hidden", c.hidden);
  get("heads", c.heads);
  get("num_experts", c.num_experts);
  get("top_k", c.top_k);
  get("lora_rank", c.lora_rank);
  get("lora_alpha", c.lora_alpha);
  get("lora_output_scale", c.lora_output_scale);
  get("vocab", c.vocab);
  get("seq_len", c.seq_len);
  get("classes", c.classes);
  get("ffn_mult", c.ffn_mult);
  get("ln_eps", c.ln_eps);
  get("embed_std", c.embed_std);
  get("pos_std", c.pos_std);
  get("router_std", c.router_std);
  get("head_std", c.head_std);
  get("lora_b_std", c.lora_b_std);
  get("pretrain_steps", c.pretrain_steps);
  if (j.contains("adapted")) {
    c.adapted.fill(false);
    for (const auto& name : j.at("adapted")) {
      c.adapted[static_cast<std::size_t>(sublayer_from_name(name.get<std::string>()))] = true;
    }
  }
}

}  // namespace mixcal::model
