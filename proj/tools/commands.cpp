// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "mixcal/data/task.hpp"
#include "mixcal/errors.hpp"
#include "mixcal/harness/config.hpp"
#include "mixcal/harness/train.hpp"
#include "mixcal/model/checkpoint.hpp"
#include "mixcal/oracles/decomposition.hpp"
#include "mixcal/oracles/probe.hpp"
#include "mixcal/oracles/prop1.hpp"

namespace mixcal::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

harness::TrainConfig load_config(const Common& c) {
  json doc = json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", c.config));
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(fmt::format("config file '{}': {}", c.config, e.what()));
    }
  }
  for (const auto& s : c.sets) harness::apply_override(doc, s);
  return harness::parse_train_config(doc);
}

fs::path out_dir(const Common& c) {
  fs::path p = c.out;
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error(fmt::format("cannot write '{}'", p.string()));
  f << text;
}

json eval_summary(const harness::EvalResult& r) {
  json regimes = json::array();
  for (const auto& s : r.regimes) {
    regimes.push_back({{"regime", s.regime}, {"count", s.count}, {"accuracy", s.accuracy}, {"mean_flu", s.mean_flu}});
  }
  return {{"n", r.report.n},
          {"accuracy", r.report.accuracy},
          {"ece", r.report.ece},
          {"mean_flu", r.mean_flu},
          {"regimes", regimes}};
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(std::stod(item));
      } else {
        if (item.find('-') != std::string::npos) throw std::invalid_argument("negative");
        out.push_back(static_cast<T>(std::stoull(item)));
      }
    } catch (const std::logic_error&) {
      throw ConfigError(fmt::format("{}: '{}' is not a valid entry", what, item));
    }
  }
  if (out.empty()) throw ConfigError(fmt::format("{}: empty list", what));
  return out;
}

const data::Dataset& pick_split(const harness::TrainData& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "val") return d.val;
  if (name == "test") return d.test;
  if (name == "shift_small") return d.shift_small;
  if (name == "shift_large") return d.shift_large;
  throw ConfigError(fmt::format("unknown split '{}'", name));
}

int gen_data(const Common& c, std::ostream& out) {
  const auto cfg = load_config(c);
  const auto dir = out_dir(c);
  const auto base = data::generate_task(cfg.task, cfg.data_seed);
  for (auto split : {data::Split::kTrain, data::Split::kVal, data::Split::kTest}) {
    const auto d = data::select_split(base, split);
    data::write_dataset(d, dir / fmt::format("{}.jsonl", data::split_name(split)));
  }
  data::write_dataset(data::generate_shifted_split(cfg.task, data::ShiftLevel::kSmall, cfg.data_seed),
                      dir / "shift_small.jsonl");
  data::write_dataset(data::generate_shifted_split(cfg.task, data::ShiftLevel::kLarge, cfg.data_seed),
                      dir / "shift_large.jsonl");
  write_text(dir / "task.json", json(cfg.task).dump(2) + "\n");
  fmt::print(out, "wrote {} examples plus two shifted splits to {}\n", base.size(), dir.string());
  return kExitOk;
}

int train_cmd(const Common& c, std::ostream& out) {
  const auto cfg = load_config(c);
  const auto dir = out_dir(c);
  const auto result = harness::train(cfg);
  model::save_checkpoint(dir / "checkpoint.json", result.model, cfg.seed, result.steps);
  write_text(dir / "metrics.csv", harness::metrics_csv(result.record));
  uncertainty::write_reliability_bins(dir / "bins.csv", result.record.final_eval.at("val").report);
  json summary = {{"steps", result.steps}, {"config", cfg}, {"final", json::object()}};
  for (const auto& [name, r] : result.record.final_eval) {
    summary["final"][name] = eval_summary(r);
    fmt::print(out, "{:<12} acc {:.4f}  ece {:.4f}  mean_flu {:.4f}\n", name, r.report.accuracy, r.report.ece,
               r.mean_flu);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

int eval_cmd(const Common& c, const std::string& checkpoint, const std::string& split, const std::string& data_file,
             std::ostream& out) {
  const auto cfg = load_config(c);
  const auto ck = model::load_checkpoint(checkpoint);
  data::Dataset d;
  if (!data_file.empty()) {
    d = data::read_dataset(data_file);
  } else {
    d = pick_split(harness::load_train_data(cfg), split);
  }
  const auto r = harness::evaluate(ck.model, d, cfg.ece_bins);
  fmt::print(out, "n {}  acc {:.4f}  ece {:.4f}  mean_flu {:.4f}\n", r.report.n, r.report.accuracy, r.report.ece,
             r.mean_flu);
  if (!c.out.empty()) {
    const auto dir = out_dir(c);
    write_text(dir / "eval.json", eval_summary(r).dump(2) + "\n");
    uncertainty::write_reliability_bins(dir / "bins.csv", r.report);
  }
  return kExitOk;
}

void print_sweep(const std::vector<harness::SweepRow>& rows, const char* name, std::ostream& out) {
  std::map<double, std::pair<double, double>> sums;
  std::map<double, std::size_t> counts;
  for (const auto& r : rows) {
    sums[r.param].first += r.acc;
    sums[r.param].second += r.ece;
    ++counts[r.param];
  }
  for (const auto& [p, s] : sums) {
    const double n = static_cast<double>(counts[p]);
    fmt::print(out, "{} {:<6} mean acc {:.4f}  mean ece {:.4f}\n", name, p, s.first / n, s.second / n);
  }
}

int sweep_beta(const Common& c, const std::string& values, const std::string& seeds, std::ostream& out) {
  const auto cfg = load_config(c);
  const auto grid = values.empty() ? harness::default_beta_grid() : parse_list<double>(values, "--values");
  const auto s = seeds.empty() ? harness::default_seeds() : parse_list<std::uint64_t>(seeds, "--seeds");
  const auto dir = out_dir(c);
  const auto rows = harness::beta_sweep(cfg, grid, s);
  write_text(dir / "sweep_beta.csv", harness::sweep_csv(rows));
  print_sweep(rows, "beta", out);
  return kExitOk;
}

int sweep_topk(const Common& c, const std::string& values, const std::string& seeds, std::ostream& out) {
  const auto cfg = load_config(c);
  const auto grid = values.empty() ? harness::default_topk_grid() : parse_list<std::size_t>(values, "--values");
  const auto s = seeds.empty() ? harness::default_seeds() : parse_list<std::uint64_t>(seeds, "--seeds");
  const auto dir = out_dir(c);
  const auto rows = harness::topk_sweep(cfg, grid, s);
  write_text(dir / "sweep_topk.csv", harness::sweep_csv(rows));
  print_sweep(rows, "k", out);
  return kExitOk;
}

int probe_fact1(const Common& c, const std::string& checkpoint, const std::string& eps, std::uint64_t direction_seed,
                std::ostream& out) {
  const auto cfg = load_config(c);
  const auto m = checkpoint.empty() ? model::init_model(cfg.model, cfg.seed) : model::load_checkpoint(checkpoint).model;
  data::TaskSpec one = cfg.task;
  one.train_size = one.test_size = 0;
  one.val_size = 1;
  const auto tokens = data::generate_task(one, cfg.data_seed).front().tokens;
  oracles::ProbeOptions opt;
  if (!eps.empty()) opt.eps = parse_list<double>(eps, "--eps");
  opt.direction_seed = direction_seed;
  const auto r = oracles::perturbation_probe(m, tokens, opt);
  for (std::size_t i = 0; i < r.eps.size(); ++i) {
    fmt::print(out, "eps {:<8} residual {:.6e}  linear {:.6e}\n", r.eps[i], r.residual_norm[i], r.linear_norm[i]);
  }
  fmt::print(out, "log-log slope {:.4f}\n", r.loglog_slope());
  if (!c.out.empty()) write_text(out_dir(c) / "probe.csv", oracles::probe_csv(r));
  return kExitOk;
}

int oracle_prop1(const Common& c, const std::string& checkpoint, std::ostream& out) {
  std::string csv = "p,u_star,risk\n";
  double worst = 0.0;
  for (int i = 0; i <= 20; ++i) {
    const auto m = oracles::calibration_minimizer_oracle(i / 20.0);
    worst = std::max(worst, std::abs(m.u_star - m.p));
    csv += fmt::format("{},{},{}\n", m.p, m.u_star, m.risk);
  }
  fmt::print(out, "max |u* - p| over p in {{0, 0.05, ..., 1}}: {:.3e}\n", worst);
  json report = {{"max_abs_gap", worst}};
  if (!checkpoint.empty()) {
    const auto cfg = load_config(c);
    const auto ck = model::load_checkpoint(checkpoint);
    const auto rep = oracles::empirical_prop1_check(ck.model, harness::load_train_data(cfg).val);
    for (const auto& r : rep.regimes) {
      fmt::print(out, "regime {}  n {}  acc {:.4f}  mean_flu {:.4f}\n", r.regime, r.count, r.accuracy, r.mean_flu);
    }
    fmt::print(out, "spearman(mean_flu, acc) {:.4f}\n", rep.spearman);
    report["spearman"] = rep.spearman;
    report["regimes"] = json::array();
    for (const auto& r : rep.regimes) {
      report["regimes"].push_back(
          {{"regime", r.regime}, {"count", r.count}, {"accuracy", r.accuracy}, {"mean_flu", r.mean_flu}});
    }
  }
  if (!c.out.empty()) {
    const auto dir = out_dir(c);
    write_text(dir / "prop1.csv", csv);
    write_text(dir / "prop1.json", report.dump(2) + "\n");
  }
  return worst <= oracles::kPropGridStep ? kExitOk : kExitFailure;
}

int check_decomp(std::uint64_t seed, std::ostream& out) {
  double worst = 0.0;
  for (auto [K, L] : {std::pair<std::size_t, std::size_t>{2, 3}, {3, 2}}) {
    const auto stack = oracles::random_linear_stack(K, L, 4, seed + 10 * K + L);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> w(L, std::vector<double>(K));
    for (auto& row : w) {
      double s = 0.0;
      for (auto& a : row) s += (a = u(rng));
      for (auto& a : row) a /= s;
    }
    Eigen::VectorXd x(4);
    for (auto& v : x) v = u(rng) - 0.5;
    const double diff = oracles::check_hierarchical_naive_equivalence(stack, w, x);
    worst = std::max(worst, diff);
    fmt::print(out, "K={} L={} max abs diff {:.3e}\n", K, L, diff);
  }
  return worst < 1e-10 ? kExitOk : kExitFailure;
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture-of-LoRA calibration experiments", "mixcal"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;
  auto add_common = [&](CLI::App* sub, bool config_required, bool out_required) {
    auto* opt = sub->add_option("--config", common.config, "JSON config file");
    if (config_required) opt->required();
    sub->add_option("--set", common.sets, "Override a config field, key=value (repeatable)");
    auto* o = sub->add_option("--out", common.out, "Output directory");
    if (out_required) o->required();
  };

  std::function<int()> action;
  std::string checkpoint, split = "test", data_file, values, seeds, eps;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic task splits as JSONL");
  add_common(gen, true, true);
  gen->callback([&] { action = [&] { return gen_data(common, out); }; });

  auto* tr = app.add_subcommand("train", "Train one model; writes checkpoint.json, metrics.csv, bins.csv");
  add_common(tr, true, true);
  tr->callback([&] { action = [&] { return train_cmd(common, out); }; });

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_common(ev, true, false);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--split", split, "val, test, shift_small or shift_large")
      ->check(CLI::IsMember({"train", "val", "test", "shift_small", "shift_large"}));
  ev->add_option("--data", data_file, "JSONL dataset instead of a generated split");
  ev->callback([&] { action = [&] { return eval_cmd(common, checkpoint, split, data_file, out); }; });

  auto* sb = app.add_subcommand("sweep-beta", "Train over a grid of beta values and seeds");
  add_common(sb, true, true);
  sb->add_option("--values", values, "Comma-separated beta values");
  sb->add_option("--seeds", seeds, "Comma-separated seeds");
  sb->callback([&] { action = [&] { return sweep_beta(common, values, seeds, out); }; });

  auto* sk = app.add_subcommand("sweep-topk", "Train over a grid of top-k values and seeds");
  add_common(sk, true, true);
  sk->add_option("--values", values, "Comma-separated k values");
  sk->add_option("--seeds", seeds, "Comma-separated seeds");
  sk->callback([&] { action = [&] { return sweep_topk(common, values, seeds, out); }; });

  auto* pf = app.add_subcommand("probe-fact1", "First-order perturbation probe in mixture-weight space");
  add_common(pf, true, false);
  pf->add_option("--checkpoint", checkpoint, "Probe a trained model instead of a fresh one");
  pf->add_option("--eps", eps, "Comma-separated, strictly decreasing eps ladder");
  pf->add_option("--direction-seed", seed, "Seed of the perturbation direction");
  pf->callback([&] { action = [&] { return probe_fact1(common, checkpoint, eps, seed, out); }; });

  auto* op = app.add_subcommand("oracle-prop1", "Calibration-risk minimizer grid; per-regime FLU with --checkpoint");
  add_common(op, false, false);
  op->add_option("--checkpoint", checkpoint, "Trained model for the empirical check");
  op->callback([&] { action = [&] { return oracle_prop1(common, checkpoint, out); }; });

  auto* cd = app.add_subcommand("check-decomp", "Naive vs hierarchical decomposition on random linear experts");
  cd->add_option("--seed", seed, "Seed of the random experts");
  cd->callback([&] { action = [&] { return check_decomp(seed, out); }; });

  if (!args.empty() && !args.front().empty() && args.front()[0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->check_name(args.front());
    if (!known) {
      error_line(err, "usage", fmt::format("unknown subcommand '{}'", args.front()));
      err << app.help();
      return kExitUsage;
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    error_line(err, "usage", e.what());
    err << app.help();
    return kExitUsage;
  }

  try {
    return action();
  } catch (const ConfigError& e) {
    error_line(err, "config", e.what());
    return kExitUsage;
  } catch (const ParseError& e) {
    error_line(err, "parse", e.what());
    return kExitFailure;
  } catch (const NumericError& e) {
    error_line(err, "numeric", e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    error_line(err, "runtime", e.what());
    return kExitFailure;
  }
}

}  // namespace mixcal::cli
