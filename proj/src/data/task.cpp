// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/data/task.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mixcal/errors.hpp"

namespace mixcal::data {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 4> kSplitNames = {"train", "val", "test", "shift"};

// Separate random streams for the world and for each split.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kWorldStream = 0x5eed;

void check_distribution(const std::vector<double>& p, std::size_t n, const char* field) {
  if (p.size() != n) throw ConfigError(fmt::format("task.{} has {} entries for {} regimes", field, p.size(), n));
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError(fmt::format("task.{} entries must be >= 0", field));
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError(fmt::format("task.{} sums to {}, not 1", field, total));
}

}  // namespace

std::string_view split_name(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

Split split_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kSplitNames.size(); ++i) {
    if (kSplitNames[i] == name) return static_cast<Split>(i);
  }
  throw ConfigError(fmt::format("unknown split '{}'", name));
}

std::string_view shift_level_name(ShiftLevel s) { return s == ShiftLevel::kSmall ? "small" : "large"; }

ShiftLevel shift_level_from_name(std::string_view name) {
  if (name == "small") return ShiftLevel::kSmall;
  if (name == "large") return ShiftLevel::kLarge;
  throw ConfigError(fmt::format("unknown shift level '{}' (expected small or large)", name));
}

void TaskSpec::validate() const {
  if (vocab == 0 || seq_len == 0 || feature_dim == 0) {
    throw ConfigError("task.vocab, task.seq_len and task.feature_dim must be positive");
  }
  if (classes < 2) throw ConfigError("task.classes must be at least 2");
  if (regimes == 0 || regimes > vocab) {
    throw ConfigError(fmt::format("task.regimes ({}) must lie in [1, vocab]", regimes));
  }
  if (noise.size() != regimes) {
    throw ConfigError(fmt::format("task.noise has {} entries for {} regimes", noise.size(), regimes));
  }
  for (double v : noise) {
    if (!(v >= 0.0 && v < 0.5)) throw ConfigError(fmt::format("task.noise rate {} outside [0, 0.5)", v));
  }
  check_distribution(proportions, regimes, "proportions");
  check_distribution(shift_proportions, regimes, "shift_proportions");
  if (!(regime_focus >= 0.0 && regime_focus <= 1.0)) throw ConfigError("task.regime_focus outside [0, 1]");
  if (!std::isfinite(shift_rotation)) throw ConfigError("task.shift_rotation must be finite");
}

void to_json(json& j, const TaskSpec& s) {
  j = json{{"vocab", s.vocab},
           {"seq_len", s.seq_len},
           {"classes", s.classes},
           {"regimes", s.regimes},
           {"noise", s.noise},
           {"proportions", s.proportions},
           {"feature_dim", s.feature_dim},
           {"regime_focus", s.regime_focus},
           {"train_size", s.train_size},
           {"val_size", s.val_size},
           {"test_size", s.test_size},
           {"shift_size", s.shift_size},
           {"shift_proportions", s.shift_proportions},
           {"shift_rotation", s.shift_rotation}};
}

void from_json(const json& j, TaskSpec& s) {
  static const std::vector<std::string> kKnown = {
      "vocab",      "seq_len",   "classes",  "regimes",   "noise",      "proportions",       "feature_dim",
      "regime_focus", "train_size", "val_size", "test_size", "shift_size", "shift_proportions", "shift_rotation"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      throw ConfigError(fmt::format("unknown field task.{}", key));
    }
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("vocab", s.vocab);
  get("seq_len", s.seq_len);
  get("classes", s.classes);
  get("regimes", s.regimes);
  get("noise", s.noise);
  get("proportions", s.proportions);
  get("feature_dim", s.feature_dim);
  get("regime_focus", s.regime_focus);
  get("train_size", s.train_size);
  get("val_size", s.val_size);
  get("test_size", s.test_size);
  get("shift_size", s.shift_size);
  get("shift_proportions", s.shift_proportions);
  get("shift_rotation", s.shift_rotation);
}

World make_world(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto rng = stream_rng(seed, kWorldStream);
  std::normal_distribution<double> n01(0.0, 1.0);
  World w;
  w.spec = spec;
  w.features.resize(spec.vocab * spec.feature_dim);
  for (auto& x : w.features) x = n01(rng);
  const std::size_t rule_size = spec.regimes * spec.classes * spec.feature_dim;
  w.rules.resize(rule_size);
  for (auto& x : w.rules) x = n01(rng);
  w.rotated.resize(rule_size);
  for (auto& x : w.rotated) x = n01(rng);
  return w;
}

std::size_t rule_label(const World& w, std::span<const std::size_t> tokens, std::size_t regime,
                       double angle) {
  const auto& s = w.spec;
  if (regime >= s.regimes) throw IndexError(fmt::format("regime {} of {}", regime, s.regimes));
  if (tokens.empty()) throw ContractError("rule_label: empty token sequence");
  std::vector<double> mean(s.feature_dim, 0.0);
  for (auto t : tokens) {
    if (t >= s.vocab) throw IndexError(fmt::format("token {} outside vocabulary of {}", t, s.vocab));
    for (std::size_t f = 0; f < s.feature_dim; ++f) mean[f] += w.features[t * s.feature_dim + f];
  }
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::size_t best = 0;
  double best_score = -INFINITY;
  for (std::size_t c = 0; c < s.classes; ++c) {
    const std::size_t off = (regime * s.classes + c) * s.feature_dim;
    double score = 0.0;
    for (std::size_t f = 0; f < s.feature_dim; ++f) {
      const double p = angle == 0.0 ? w.rules[off + f] : ca * w.rules[off + f] + sa * w.rotated[off + f];
      score += p * mean[f];
    }
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

Dataset sample_examples(const World& w, const SamplingPlan& plan, std::uint64_t seed) {
  const auto& s = w.spec;
  check_distribution(plan.proportions, s.regimes, "proportions");
  auto rng = stream_rng(seed, plan.stream);
  std::discrete_distribution<std::size_t> pick_regime(plan.proportions.begin(), plan.proportions.end());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_token(0, s.vocab - 1);
  std::uniform_int_distribution<std::size_t> other_class(0, s.classes - 2);
  const std::size_t block = s.vocab / s.regimes;
  std::uniform_int_distribution<std::size_t> in_block(0, block - 1);

  Dataset out;
  out.reserve(plan.count);
  for (std::size_t i = 0; i < plan.count; ++i) {
    Example ex;
    ex.split = plan.split;
    ex.regime = pick_regime(rng);
    ex.tokens.resize(s.seq_len);
    for (auto& t : ex.tokens) {
      t = u01(rng) < s.regime_focus ? ex.regime * block + in_block(rng) : any_token(rng);
    }
    ex.label = rule_label(w, ex.tokens, ex.regime, plan.angle);
    if (u01(rng) < s.noise[ex.regime]) {
      const std::size_t other = other_class(rng);
      ex.label = other >= ex.label ? other + 1 : other;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

Dataset generate_task(const TaskSpec& spec, std::uint64_t seed) {
  const World w = make_world(spec, seed);
  Dataset out;
  const std::pair<Split, std::size_t> parts[] = {
      {Split::kTrain, spec.train_size}, {Split::kVal, spec.val_size}, {Split::kTest, spec.test_size}};
  for (auto [split, count] : parts) {
    auto part = sample_examples(w, {spec.proportions, 0.0, split, count, static_cast<std::uint64_t>(split) + 1}, seed);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

SamplingPlan shift_plan(const TaskSpec& spec, ShiftLevel level) {
  SamplingPlan p;
  p.proportions = spec.shift_proportions;
  p.angle = level == ShiftLevel::kLarge ? spec.shift_rotation : 0.0;
  p.split = Split::kShift;
  p.count = spec.shift_size;
  p.stream = level == ShiftLevel::kLarge ? 11 : 10;
  return p;
}

Dataset generate_shifted_split(const TaskSpec& spec, ShiftLevel level, std::uint64_t seed) {
  return sample_examples(make_world(spec, seed), shift_plan(spec, level), seed);
}

Dataset select_split(const Dataset& d, Split s) {
  Dataset out;
  std::copy_if(d.begin(), d.end(), std::back_inserter(out), [s](const Example& e) { return e.split == s; });
  return out;
}

std::string dataset_to_jsonl(const Dataset& d) {
  std::string out;
  for (const auto& e : d) {
    out += json{{"tokens", e.tokens}, {"label", e.label}, {"regime", e.regime}, {"split", split_name(e.split)}}.dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  f << dataset_to_jsonl(d);
}

Dataset dataset_from_jsonl(std::string_view text) {
  Dataset out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = json::parse(line);
      for (const char* key : {"tokens", "label", "regime", "split"}) {
        if (!j.contains(key)) throw ParseError(fmt::format("line {}: missing field '{}'", line_no, key), line_no);
      }
      Example e;
      e.tokens = j.at("tokens").get<std::vector<std::size_t>>();
      e.label = j.at("label").get<std::size_t>();
      e.regime = j.at("regime").get<std::size_t>();
      e.split = split_from_name(j.at("split").get<std::string>());
      if (e.tokens.empty()) throw ParseError(fmt::format("line {}: empty token list", line_no), line_no);
      out.push_back(std::move(e));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ParseError(fmt::format("line {}: {}", line_no, ex.what()), line_no);
    }
  }
  return out;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  std::ostringstream buf;
  buf << f.rdbuf();
  return dataset_from_jsonl(buf.str());
}

std::vector<std::vector<std::size_t>> batch_iter(const Dataset& d, std::size_t batch_size,
                                                 std::uint64_t epoch_seed) {
  if (batch_size == 0) throw ContractError("batch_iter: batch size must be at least 1");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
  }
  return batches;
}

LabelledBatch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  LabelledBatch b;
  for (auto i : indices) {
    const auto& e = d.at(i);
    b.tokens.tokens.insert(b.tokens.tokens.end(), e.tokens.begin(), e.tokens.end());
    b.tokens.lengths.push_back(e.tokens.size());
    b.labels.push_back(e.label);
    b.regimes.push_back(e.regime);
  }
  return b;
}

LabelledBatch make_batch(const Dataset& d) {
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(d, all);
}

void check_compatible(const model::ModelConfig& m, const TaskSpec& s) {
  if (s.vocab > m.vocab) throw ConfigError(fmt::format("task.vocab ({}) exceeds model.vocab ({})", s.vocab, m.vocab));
  if (s.seq_len > m.seq_len) {
    throw ConfigError(fmt::format("task.seq_len ({}) exceeds model.seq_len ({})", s.seq_len, m.seq_len));
  }
  if (s.classes != m.classes) {
    throw ConfigError(fmt::format("task.classes ({}) differs from model.classes ({})", s.classes, m.classes));
  }
}

void check_compatible(const model::ModelConfig& m, const Dataset& d) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& e = d[i];
    if (e.label >= m.classes) {
      throw ConfigError(fmt::format("example {}: label {} but model.classes is {}", i, e.label, m.classes));
    }
    if (e.tokens.size() > m.seq_len) {
      throw ConfigError(fmt::format("example {}: {} tokens but model.seq_len is {}", i, e.tokens.size(), m.seq_len));
    }
    for (auto t : e.tokens) {
      if (t >= m.vocab) throw ConfigError(fmt::format("example {}: token {} but model.vocab is {}", i, t, m.vocab));
    }
  }
}

}  // namespace mixcal::data
