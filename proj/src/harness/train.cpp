// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/harness/train.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"
#include "mixcal/harness/optim.hpp"
#include "mixcal/uncertainty/flu.hpp"

namespace mixcal::harness {

using ad::Tensor;

namespace {

constexpr std::size_t kEvalChunk = 128;

// Distinct streams derived from the run seed.
enum : std::uint64_t {
  kPretrainWorld = 0x70726574,
  kHeadRedraw = 0x68656164,
  kDropout = 0x64726f70,
  kEpoch = 0x65706f63,
};

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + stream;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<bool> correctness(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const auto pred = ad::argmax_rows(logits);
  std::vector<bool> ok(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) ok[i] = pred[i] == labels[i];
  return ok;
}

// Cycles through shuffled epochs of a dataset.
class BatchStream {
 public:
  BatchStream(const data::Dataset& d, std::size_t batch_size, std::uint64_t seed)
      : d_(d), batch_size_(batch_size), seed_(seed) {
    if (d_.empty()) throw ConfigError("training split is empty");
  }

  data::LabelledBatch next() {
    if (pos_ == batches_.size()) {
      batches_ = data::batch_iter(d_, batch_size_, mix(seed_, kEpoch + epoch_++));
      pos_ = 0;
    }
    return data::make_batch(d_, batches_[pos_++]);
  }

 private:
  const data::Dataset& d_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t pos_ = 0;
};

void redraw(Tensor t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : t.mutable_data()) x = stddev > 0.0 ? dist(rng) : 0.0;
}

}  // namespace

EvalResult evaluate(const model::MixLoraModel& model, const data::Dataset& split, std::size_t num_bins) {
  data::check_compatible(model.config(), split);
  if (split.empty()) throw ContractError("evaluate: empty split");
  ad::NoGradGuard no_grad;
  EvalResult out;
  std::vector<double> confidence;
  for (std::size_t start = 0; start < split.size(); start += kEvalChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + kEvalChunk, split.size()); ++i) idx.push_back(i);
    const auto batch = data::make_batch(split, idx);
    const auto trace = model.forward(batch.tokens);
    const auto pred = uncertainty::predict(trace.logits);
    const auto flu = uncertainty::compute_flu(trace);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      confidence.push_back(pred.confidence[i]);
      out.correct.push_back(pred.label[i] == batch.labels[i]);
      out.flu.push_back(flu.value(i));
    }
  }
  out.report = uncertainty::expected_calibration_error(confidence, out.correct, num_bins);
  double total = 0.0;
  for (double f : out.flu) total += f;
  out.mean_flu = total / static_cast<double>(out.flu.size());

  std::map<std::size_t, RegimeStats> by_regime;
  for (std::size_t i = 0; i < split.size(); ++i) {
    auto& r = by_regime[split[i].regime];
    r.regime = split[i].regime;
    ++r.count;
    r.accuracy += out.correct[i] ? 1.0 : 0.0;
    r.mean_flu += out.flu[i];
  }
  for (auto& [_, r] : by_regime) {
    r.accuracy /= static_cast<double>(r.count);
    r.mean_flu /= static_cast<double>(r.count);
    out.regimes.push_back(r);
  }
  return out;
}

std::string metrics_csv(const RunRecord& record) {
  std::string out = "step,ce,lb,cal,total,val_acc,val_ece,mean_flu\n";
  for (const auto& r : record.rows) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.step, r.ce, r.lb, r.cal, r.total, r.val_acc, r.val_ece,
                       r.mean_flu);
  }
  return out;
}

uncertainty::LossBreakdown objective(const model::MixLoraModel& model, const data::LabelledBatch& batch,
                                     const TrainConfig& config, std::size_t step,
                                     const model::ForwardOptions& opts) {
  const auto trace = model.forward(batch.tokens, opts);
  Tensor ce = ad::cross_entropy_rows(trace.logits, batch.labels);
  Tensor lb = uncertainty::load_balance_loss(trace, config.balance_coef);
  const auto flu = uncertainty::compute_flu(trace);
  Tensor cal = uncertainty::calibration_loss(correctness(trace.logits, batch.labels), flu.flu);
  return uncertainty::total_loss(std::move(ce), std::move(lb), std::move(cal), config.gamma,
                                 beta_schedule(config.schedule, step, config.beta));
}

void pretrain_base(model::MixLoraModel& model, const TrainConfig& config) {
  const std::size_t steps = config.model.pretrain_steps;
  if (steps == 0) return;

  data::TaskSpec generic = config.task;
  std::fill(generic.noise.begin(), generic.noise.end(), 0.0);
  generic.val_size = generic.test_size = 0;
  // Token features come from the task world, rules from a fresh one: the base
  // learns what tokens carry but not which rule a regime applies.
  const auto world_seed = mix(config.seed, kPretrainWorld);
  auto world = data::make_world(generic, config.data_seed);
  world.rules = data::make_world(generic, world_seed).rules;
  const auto examples = data::sample_examples(
      world, {generic.proportions, 0.0, data::Split::kTrain, generic.train_size, 0}, world_seed);

  // Everything except the adapters and routers learns here; routers keep
  // their initial spread so the kept-mass scale seen by the base does not move.
  std::vector<Tensor> params;
  std::vector<Tensor> unfrozen;
  for (const auto& p : model.parameters()) {
    if (p.name.find(".experts.") != std::string::npos || p.name.ends_with("router")) continue;
    Tensor t = p.tensor;
    if (!t.requires_grad()) {
      t.set_requires_grad(true);
      unfrozen.push_back(t);
    }
    params.push_back(t);
  }
  AdamW opt(params, std::vector<bool>(params.size(), false), {config.pretrain_lr, 0.9, 0.999, 1e-8, 0.0});
  BatchStream stream(examples, config.batch_size, world_seed);
  for (std::size_t s = 0; s < steps; ++s) {
    const auto batch = stream.next();
    Tensor loss = ad::cross_entropy_rows(model.forward(batch.tokens).logits, batch.labels);
    if (!std::isfinite(loss.item())) {
      throw NumericError(fmt::format("pre-training loss is {} at step {}", loss.item(), s + 1));
    }
    loss.backward();
    opt.step();
    for (auto p : model.parameters()) p.tensor.zero_grad();
  }
  for (auto& t : unfrozen) t.set_requires_grad(false);

  std::mt19937_64 rng(mix(config.seed, kHeadRedraw));
  redraw(model.head_weight(), config.model.head_std, rng);
  redraw(model.head_bias(), 0.0, rng);
}

TrainData load_train_data(const TrainConfig& config) {
  TrainData d;
  const auto generated = data::generate_task(config.task, config.data_seed);
  d.train = config.train_path.empty() ? data::select_split(generated, data::Split::kTrain)
                                      : data::read_dataset(config.train_path);
  d.val = config.val_path.empty() ? data::select_split(generated, data::Split::kVal)
                                  : data::read_dataset(config.val_path);
  d.test = data::select_split(generated, data::Split::kTest);
  d.shift_small = data::generate_shifted_split(config.task, data::ShiftLevel::kSmall, config.data_seed);
  d.shift_large = data::generate_shifted_split(config.task, data::ShiftLevel::kLarge, config.data_seed);
  return d;
}

TrainResult train(const TrainConfig& config) { return train(config, load_train_data(config)); }

TrainResult train(const TrainConfig& config, const TrainData& data) {
  config.validate();
  if (data.val.empty()) throw ConfigError("validation split is empty");
  for (const auto* split : {&data.train, &data.val, &data.test, &data.shift_small, &data.shift_large}) {
    data::check_compatible(config.model, *split);
  }

  TrainResult res{model::init_model(config.model, config.seed), {}, 0};
  auto& model = res.model;
  pretrain_base(model, config);

  std::vector<Tensor> params;
  std::vector<bool> decay;
  for (const auto& p : model.parameters()) {
    if (!p.trainable) continue;
    params.push_back(p.tensor);
    decay.push_back(p.weight_decay);
  }
  AdamW opt(params, decay,
            {config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay});

  BatchStream stream(data.train, config.batch_size, config.seed);
  std::mt19937_64 dropout_rng(mix(config.seed, kDropout));
  const model::ForwardOptions opts{true, config.dropout, &dropout_rng};

  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const auto batch = stream.next();
    const auto parts = objective(model, batch, config, step - 1, opts);
    MetricsRow row{step, parts.ce.item(), parts.load_balance.item(), parts.calibration.item(),
                   parts.total.item()};
    if (!std::isfinite(row.total)) {
      throw NumericError(fmt::format("non-finite loss at step {}: ce={} lb={} cal={} total={}", step, row.ce,
                                     row.lb, row.cal, row.total));
    }
    parts.total.backward();
    opt.step();
    opt.zero_grad();
    res.steps = step;

    if (step % config.eval_every == 0 || step == config.max_steps) {
      const auto ev = evaluate(model, data.val, config.ece_bins);
      row.val_acc = ev.report.accuracy;
      row.val_ece = ev.report.ece;
      row.mean_flu = ev.mean_flu;
      res.record.rows.push_back(row);
    }
  }

  const std::pair<const char*, const data::Dataset*> finals[] = {{"val", &data.val},
                                                                 {"test", &data.test},
                                                                 {"shift_small", &data.shift_small},
                                                                 {"shift_large", &data.shift_large}};
  for (auto [name, split] : finals) {
    if (!split->empty()) res.record.final_eval.emplace(name, evaluate(model, *split, config.ece_bins));
  }
  return res;
}

std::vector<double> default_beta_grid() { return {0.0, 0.2, 0.5, 0.8, 1.0, 1.2, 1.5, 1.8, 2.0}; }
std::vector<std::size_t> default_topk_grid() { return {1, 2, 3, 4, 5}; }
std::vector<std::uint64_t> default_seeds() { return {0, 1, 2, 3, 4}; }

namespace {

template <typename T, typename Apply>
std::vector<SweepRow> sweep(const TrainConfig& config, const std::vector<T>& values,
                            const std::vector<std::uint64_t>& seeds, Apply apply) {
  if (values.empty() || seeds.empty()) throw ConfigError("sweep needs at least one value and one seed");
  const auto data = load_train_data(config);
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    for (auto seed : seeds) {
      TrainConfig c = config;
      c.seed = seed;
      apply(c, v);
      const auto res = train(c, data);
      const auto& val = res.record.final_eval.at("val").report;
      rows.push_back({static_cast<double>(v), seed, val.accuracy, val.ece});
    }
  }
  return rows;
}

}  // namespace

std::vector<SweepRow> beta_sweep(const TrainConfig& config, const std::vector<double>& betas,
                                 const std::vector<std::uint64_t>& seeds) {
  for (double b : betas) {
    if (!(b >= 0.0)) throw ConfigError(fmt::format("beta {} must be >= 0", b));
  }
  return sweep(config, betas, seeds, [](TrainConfig& c, double b) { c.beta = b; });
}

std::vector<SweepRow> topk_sweep(const TrainConfig& config, const std::vector<std::size_t>& ks,
                                 const std::vector<std::uint64_t>& seeds) {
  for (auto k : ks) {
    if (k == 0 || k > config.model.num_experts) {
      throw ConfigError(fmt::format("top_k {} outside [1, model.num_experts = {}]", k, config.model.num_experts));
    }
  }
  return sweep(config, ks, seeds, [](TrainConfig& c, std::size_t k) { c.model.top_k = k; });
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "param,seed,acc,ece\n";
  for (const auto& r : rows) out += fmt::format("{},{},{},{}\n", r.param, r.seed, r.acc, r.ece);
  return out;
}

}  // namespace mixcal::harness
