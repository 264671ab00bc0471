// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixcal/data/task.hpp"
#include "mixcal/harness/config.hpp"
#include "mixcal/model/transformer.hpp"
#include "mixcal/uncertainty/calibration.hpp"
#include "mixcal/uncertainty/losses.hpp"

namespace mixcal::harness {

struct RegimeStats {
  std::size_t regime = 0;
  std::size_t count = 0;
  double accuracy = 0.0;
  double mean_flu = 0.0;
};

struct EvalResult {
  uncertainty::CalibrationReport report;
  double mean_flu = 0.0;
  std::vector<double> flu;
  std::vector<bool> correct;
  std::vector<RegimeStats> regimes;  // regimes present in the split, ascending
};

// One forward pass per example, no dropout. Confidence is the max softmax
// probability. ConfigError if the data does not fit the model.
EvalResult evaluate(const model::MixLoraModel& model, const data::Dataset& split,
                    std::size_t num_bins = uncertainty::kDefaultBins);

struct MetricsRow {
  std::size_t step = 0;
  double ce = 0.0, lb = 0.0, cal = 0.0, total = 0.0;
  double val_acc = 0.0, val_ece = 0.0, mean_flu = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

struct RunRecord {
  std::vector<MetricsRow> rows;
  // Final evaluations keyed by "val", "test", "shift_small", "shift_large".
  std::map<std::string, EvalResult> final_eval;
};

std::string metrics_csv(const RunRecord& record);

// The training objective on one batch at a given step.
uncertainty::LossBreakdown objective(const model::MixLoraModel& model, const data::LabelledBatch& batch,
                                     const TrainConfig& config, std::size_t step,
                                     const model::ForwardOptions& opts = {});

// Trains the frozen base, embeddings and head with cross-entropy on a generic
// task that shares the task world's token features but has fresh rules, then
// refreezes the base and redraws the head. No-op when model.pretrain_steps is 0.
void pretrain_base(model::MixLoraModel& model, const TrainConfig& config);

struct TrainData {
  data::Dataset train, val, test, shift_small, shift_large;
};
TrainData load_train_data(const TrainConfig& config);

struct TrainResult {
  model::MixLoraModel model;
  RunRecord record;
  std::size_t steps = 0;
};

// Fresh model, pre-training, then max_steps of AdamW on the adapters, routers
// and head. Throws NumericError naming the step on a non-finite loss.
TrainResult train(const TrainConfig& config);
TrainResult train(const TrainConfig& config, const TrainData& data);

struct SweepRow {
  double param = 0.0;
  std::uint64_t seed = 0;
  double acc = 0.0;
  double ece = 0.0;
};

std::vector<double> default_beta_grid();
std::vector<std::size_t> default_topk_grid();
std::vector<std::uint64_t> default_seeds();

// Train and evaluate on the val split for every (value, seed).
std::vector<SweepRow> beta_sweep(const TrainConfig& config, const std::vector<double>& betas,
                                 const std::vector<std::uint64_t>& seeds);
// ConfigError when some k exceeds model.num_experts.
std::vector<SweepRow> topk_sweep(const TrainConfig& config, const std::vector<std::size_t>& ks,
                                 const std::vector<std::uint64_t>& seeds);
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace mixcal::harness
