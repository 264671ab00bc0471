// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic regime-structured classification task.
//
// A seed fixes a world: a feature vector per token, a block of "home" tokens
// per regime and a rule projection per regime. An example picks a regime,
// draws tokens (mostly from the regime's block), and is labelled by
// argmax_c P_r . mean(features of its tokens). With the regime's noise rate
// the label is then replaced by a uniformly chosen other class, so the best
// achievable accuracy on regime r is 1 - noise_r.
//
// Shifted splits reweight regimes (small) and also rotate every rule
// projection towards an independent random one by a fixed angle (large).

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mixcal/model/transformer.hpp"

namespace mixcal::data {

enum class Split { kTrain, kVal, kTest, kShift };
std::string_view split_name(Split s);
Split split_from_name(std::string_view name);  // ConfigError if unknown

enum class ShiftLevel { kSmall, kLarge };
std::string_view shift_level_name(ShiftLevel s);
ShiftLevel shift_level_from_name(std::string_view name);

struct TaskSpec {
  std::size_t vocab = 32;
  std::size_t seq_len = 16;
  std::size_t classes = 4;
  std::size_t regimes = 4;
  std::vector<double> noise = {0.0, 0.1, 0.25, 0.4};
  std::vector<double> proportions = {0.25, 0.25, 0.25, 0.25};
  // Token features the rules read.
  std::size_t feature_dim = 8;
  // Chance that a token comes from the regime's home block.
  double regime_focus = 0.75;

  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t test_size = 500;
  std::size_t shift_size = 500;

  std::vector<double> shift_proportions = {0.1, 0.2, 0.3, 0.4};
  // Radians; only the large shift rotates.
  double shift_rotation = 0.9;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TaskSpec& s);
void from_json(const nlohmann::json& j, TaskSpec& s);

struct Example {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  std::size_t regime = 0;
  Split split = Split::kTrain;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

struct World {
  TaskSpec spec;
  std::vector<double> features;  // [vocab x feature_dim]
  std::vector<double> rules;     // [regimes x classes x feature_dim]
  std::vector<double> rotated;   // independent directions for the large shift, same layout
};

World make_world(const TaskSpec& spec, std::uint64_t seed);

// Noise-free label of `tokens` under regime r's rule, rotated by `angle`.
std::size_t rule_label(const World& w, std::span<const std::size_t> tokens, std::size_t regime,
                       double angle = 0.0);

struct SamplingPlan {
  std::vector<double> proportions;
  double angle = 0.0;
  Split split = Split::kTrain;
  std::size_t count = 0;
  // Distinguishes the random stream of this split from the others.
  std::uint64_t stream = 0;
};

Dataset sample_examples(const World& w, const SamplingPlan& plan, std::uint64_t seed);

// Train, val and test examples in that order, tagged by split.
Dataset generate_task(const TaskSpec& spec, std::uint64_t seed);
Dataset generate_shifted_split(const TaskSpec& spec, ShiftLevel level, std::uint64_t seed);
SamplingPlan shift_plan(const TaskSpec& spec, ShiftLevel level);

Dataset select_split(const Dataset& d, Split s);

// One JSON object per line: tokens, label, regime, split.
void write_dataset(const Dataset& d, const std::filesystem::path& path);
std::string dataset_to_jsonl(const Dataset& d);
// ParseError carries the 1-based line of the first bad record.
Dataset read_dataset(const std::filesystem::path& path);
Dataset dataset_from_jsonl(std::string_view text);

// Index batches covering the dataset once, in an order fixed by epoch_seed.
// The last batch may be short.
std::vector<std::vector<std::size_t>> batch_iter(const Dataset& d, std::size_t batch_size,
                                                 std::uint64_t epoch_seed);

struct LabelledBatch {
  model::TokenBatch tokens;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> regimes;
};
LabelledBatch make_batch(const Dataset& d, std::span<const std::size_t> indices);
LabelledBatch make_batch(const Dataset& d);

// ConfigError when the data cannot be fed to a model with this config.
void check_compatible(const model::ModelConfig& m, const Dataset& d);
void check_compatible(const model::ModelConfig& m, const TaskSpec& s);

}  // namespace mixcal::data
