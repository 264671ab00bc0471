// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixcal/data/task.hpp"
#include "mixcal/model/config.hpp"

namespace mixcal::harness {

enum class BetaSchedule { kConstant, kIncremental };
std::string_view beta_schedule_name(BetaSchedule s);
BetaSchedule beta_schedule_from_name(std::string_view name);

// Constant: beta. Incremental: min(1, step / 50), ramping to 1 regardless of
// beta.
double beta_schedule(BetaSchedule mode, std::size_t step, double beta);

struct TrainConfig {
  model::ModelConfig model;
  data::TaskSpec task;
  // The task world and its samples are fixed by data_seed; `seed` drives
  // initialization, pre-training, batch order and dropout.
  std::uint64_t data_seed = 2026;
  std::uint64_t seed = 0;
  // When set, these files replace the generated train and val splits.
  std::string train_path;
  std::string val_path;

  double lr = 2e-4;
  double dropout = 0.05;
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;
  double gamma = 1.0;
  double beta = 1.0;
  BetaSchedule schedule = BetaSchedule::kConstant;
  double balance_coef = 1e-2;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;

  std::size_t eval_every = 100;
  std::size_t ece_bins = 15;
  double pretrain_lr = 1e-3;

  // Throws ConfigError naming the first bad field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Unknown fields are a ConfigError; missing fields keep their defaults.
void from_json(const nlohmann::json& j, TrainConfig& c);

// Applies "a.b.c=value" to a config document. The value is parsed as JSON
// and falls back to a plain string.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Parses a config document (with overrides applied) into a validated
// TrainConfig. JSON type errors surface as ConfigError.
TrainConfig parse_train_config(const nlohmann::json& doc);

}  // namespace mixcal::harness
