// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "mixcal/errors.hpp"
#include "mixcal/harness/config.hpp"
#include "mixcal/harness/train.hpp"
#include "mixcal/model/checkpoint.hpp"
#include "mixcal/oracles/decomposition.hpp"
#include "mixcal/oracles/probe.hpp"
#include "mixcal/oracles/prop1.hpp"
#include "mixcal/uncertainty/calibration.hpp"
#include "mixcal/uncertainty/losses.hpp"

namespace py = pybind11;
using namespace mixcal;

namespace {

py::dict report_dict(const uncertainty::CalibrationReport& r) {
  py::list bins;
  for (const auto& b : r.bins) {
    py::dict d;
    d["lo"] = b.lo;
    d["hi"] = b.hi;
    d["count"] = b.count;
    d["acc"] = b.acc;
    d["conf"] = b.conf;
    bins.append(d);
  }
  py::dict out;
  out["n"] = r.n;
  out["accuracy"] = r.accuracy;
  out["ece"] = r.ece;
  out["bins"] = bins;
  return out;
}

py::dict eval_dict(const harness::EvalResult& e) {
  py::dict out = report_dict(e.report);
  out["mean_flu"] = e.mean_flu;
  out["flu"] = e.flu;
  py::list regimes;
  for (const auto& r : e.regimes) {
    py::dict d;
    d["regime"] = r.regime;
    d["count"] = r.count;
    d["accuracy"] = r.accuracy;
    d["mean_flu"] = r.mean_flu;
    regimes.append(d);
  }
  out["regimes"] = regimes;
  return out;
}

harness::TrainConfig config_from(const std::string& text) {
  return harness::parse_train_config(nlohmann::json::parse(text));
}

const data::Dataset& pick_split(const harness::TrainData& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  if (split == "shift_small") return d.shift_small;
  if (split == "shift_large") return d.shift_large;
  throw ConfigError("unknown split '" + split + "'");
}

}  // namespace

PYBIND11_MODULE(_mixcal, m) {
  m.doc() = "Mixture-of-LoRA calibration toolkit: metrics, oracles and training.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<CapacityError>(m, "CapacityError", PyExc_ValueError);

  m.def(
      "expected_calibration_error",
      [](const std::vector<double>& confidence, const std::vector<bool>& correct, std::size_t num_bins) {
        return report_dict(uncertainty::expected_calibration_error(confidence, correct, num_bins));
      },
      py::arg("confidence"), py::arg("correct"), py::arg("num_bins") = uncertainty::kDefaultBins);

  m.def(
      "calibration_loss",
      [](const std::vector<bool>& correct, const std::vector<double>& flu) {
        return uncertainty::calibration_loss(correct, flu);
      },
      py::arg("correct"), py::arg("flu"));

  m.def(
      "total_loss",
      [](double ce, double lb, double cal, double gamma, double beta) {
        return uncertainty::total_loss(ce, lb, cal, gamma, beta);
      },
      py::arg("ce"), py::arg("load_balance"), py::arg("calibration"), py::arg("gamma"), py::arg("beta"));

  m.def(
      "beta_schedule",
      [](const std::string& mode, std::size_t step, double beta) {
        return harness::beta_schedule(harness::beta_schedule_from_name(mode), step, beta);
      },
      py::arg("mode"), py::arg("step"), py::arg("beta") = 1.0);

  m.def(
      "calibration_minimizer",
      [](double p, double step) {
        const auto r = oracles::calibration_minimizer_oracle(p, step);
        return py::make_tuple(r.u_star, r.risk);
      },
      py::arg("p"), py::arg("step") = oracles::kPropGridStep);

  m.def(
      "spearman", [](const std::vector<double>& a, const std::vector<double>& b) { return oracles::spearman(a, b); },
      py::arg("a"), py::arg("b"));

  m.def(
      "check_decomposition",
      [](std::size_t K, std::size_t L, std::size_t dim, std::uint64_t seed) {
        const auto stack = oracles::random_linear_stack(K, L, dim, seed);
        std::vector<std::vector<double>> alpha(L, std::vector<double>(K, 1.0 / static_cast<double>(K)));
        Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(dim), -1.0, 1.0);
        return oracles::check_hierarchical_naive_equivalence(stack, alpha, x);
      },
      py::arg("num_experts"), py::arg("layers"), py::arg("dim") = 4, py::arg("seed") = 0);

  m.def(
      "default_config", [] { return nlohmann::json(harness::TrainConfig{}).dump(); },
      "Default training configuration as JSON text.");

  m.def(
      "generate_split",
      [](const std::string& config, const std::string& split) {
        const auto data = harness::load_train_data(config_from(config));
        py::list out;
        for (const auto& e : pick_split(data, split)) {
          py::dict d;
          d["tokens"] = e.tokens;
          d["label"] = e.label;
          d["regime"] = e.regime;
          out.append(d);
        }
        return out;
      },
      py::arg("config"), py::arg("split"));

  m.def(
      "train",
      [](const std::string& config) {
        const auto cfg = config_from(config);
        harness::TrainResult res;
        {
          py::gil_scoped_release release;
          res = harness::train(cfg);
        }
        py::dict final_eval;
        for (const auto& [name, ev] : res.record.final_eval) final_eval[py::str(name)] = eval_dict(ev);
        py::dict out;
        out["checkpoint"] = model::checkpoint_to_json(res.model, cfg.seed, res.steps).dump();
        out["metrics_csv"] = harness::metrics_csv(res.record);
        out["final"] = final_eval;
        return out;
      },
      py::arg("config"), "Train from a JSON config; returns checkpoint JSON, metrics CSV and final evaluations.");

  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& config, const std::string& split) {
        const auto ck = model::checkpoint_from_json(nlohmann::json::parse(checkpoint));
        const auto cfg = config_from(config);
        const auto data = harness::load_train_data(cfg);
        return eval_dict(harness::evaluate(ck.model, pick_split(data, split), cfg.ece_bins));
      },
      py::arg("checkpoint"), py::arg("config"), py::arg("split") = "val");

  m.def(
      "perturbation_probe",
      [](const std::string& checkpoint, const std::vector<std::size_t>& tokens, const std::vector<double>& eps,
         std::uint64_t direction_seed) {
        const auto ck = model::checkpoint_from_json(nlohmann::json::parse(checkpoint));
        oracles::ProbeOptions opt;
        opt.eps = eps;
        opt.direction_seed = direction_seed;
        const auto r = oracles::perturbation_probe(ck.model, tokens, opt);
        py::dict out;
        out["eps"] = r.eps;
        out["residual_norm"] = r.residual_norm;
        out["linear_norm"] = r.linear_norm;
        std::size_t usable = 0;
        for (std::size_t i = 0; i < r.eps.size(); ++i) usable += r.eps[i] > 0.0 && r.residual_norm[i] > 0.0;
        out["slope"] = usable >= 2 ? py::object(py::float_(r.loglog_slope())) : py::object(py::none());
        return out;
      },
      py::arg("checkpoint"), py::arg("tokens"), py::arg("eps") = std::vector<double>{1e-1, 1e-2, 1e-3, 1e-4},
      py::arg("direction_seed") = 0);
}
