// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints are a single JSON document:
//
//   {"format": "mixcal-checkpoint", "version": 1, "seed": ..., "step": ...,
//    "config": {...model config...},
//    "params": {"<name>": {"shape": [..], "data": "<base64 of little-endian f64>"}}}

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mixcal/model/transformer.hpp"

namespace mixcal::model {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  MixLoraModel model;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

std::string encode_f64_base64(std::span<const double> values);
// Throws ParseError on malformed input or a length that is not a whole
// number of doubles.
std::vector<double> decode_f64_base64(const std::string& text);

nlohmann::json checkpoint_to_json(const MixLoraModel& model, std::uint64_t seed, std::uint64_t step);
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

void save_checkpoint(const std::filesystem::path& path, const MixLoraModel& model,
                     std::uint64_t seed, std::uint64_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mixcal::model
