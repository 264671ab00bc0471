// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/harness/config.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "mixcal/errors.hpp"

namespace mixcal::harness {

using nlohmann::json;

std::string_view beta_schedule_name(BetaSchedule s) {
  return s == BetaSchedule::kConstant ? "constant" : "incremental";
}

BetaSchedule beta_schedule_from_name(std::string_view name) {
  if (name == "constant") return BetaSchedule::kConstant;
  if (name == "incremental") return BetaSchedule::kIncremental;
  throw ConfigError(fmt::format("unknown beta schedule '{}' (expected constant or incremental)", name));
}

double beta_schedule(BetaSchedule mode, std::size_t step, double beta) {
  if (mode == BetaSchedule::kConstant) return beta;
  return std::min(1.0, static_cast<double>(step) / 50.0);
}

void TrainConfig::validate() const {
  model.validate();
  task.validate();
  data::check_compatible(model, task);
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(balance_coef > 0.0)) throw ConfigError("balance_coef must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (ece_bins == 0) throw ConfigError("ece_bins must be positive");
  if (!(pretrain_lr > 0.0)) throw ConfigError("pretrain_lr must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"model", c.model},
           {"task", c.task},
           {"data_seed", c.data_seed},
           {"seed", c.seed},
           {"train_path", c.train_path},
           {"val_path", c.val_path},
           {"lr", c.lr},
           {"dropout", c.dropout},
           {"batch_size", c.batch_size},
           {"max_steps", c.max_steps},
           {"gamma", c.gamma},
           {"beta", c.beta},
           {"beta_schedule", beta_schedule_name(c.schedule)},
           {"balance_coef", c.balance_coef},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"weight_decay", c.weight_decay},
           {"eval_every", c.eval_every},
           {"ece_bins", c.ece_bins},
           {"pretrain_lr", c.pretrain_lr}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> kKnown = {
      "model",      "task",       "data_seed",    "seed",       "train_path", "val_path",
      "lr",         "dropout",    "batch_size",   "max_steps",  "gamma",      "beta",
      "beta_schedule", "balance_coef", "adam_beta1", "adam_beta2", "adam_eps", "weight_decay",
      "eval_every", "ece_bins",   "pretrain_lr"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      throw ConfigError(fmt::format("unknown config field '{}'", key));
    }
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("model", c.model);
  get("task", c.task);
  get("data_seed", c.data_seed);
  get("seed", c.seed);
  get("train_path", c.train_path);
  get("val_path", c.val_path);
  get("lr", c.lr);
  get("dropout", c.dropout);
  get("batch_size", c.batch_size);
  get("max_steps", c.max_steps);
  get("gamma", c.gamma);
  get("beta", c.beta);
  if (j.contains("beta_schedule")) c.schedule = beta_schedule_from_name(j.at("beta_schedule").get<std::string>());
  get("balance_coef", c.balance_coef);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("eval_every", c.eval_every);
  get("ece_bins", c.ece_bins);
  get("pretrain_lr", c.pretrain_lr);
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' is not of the form key=value", assignment));
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(fmt::format("override key '{}' has an empty component", key));
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError(fmt::format("override '{}': '{}' is not an object", key, part));
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

TrainConfig parse_train_config(const json& doc) {
  TrainConfig c;
  try {
    c = doc.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("invalid config: {}", e.what()));
  }
  c.validate();
  return c;
}

}  // namespace mixcal::harness
