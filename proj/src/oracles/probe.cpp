// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/oracles/probe.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"

namespace mixcal::oracles {

using ad::Tensor;

namespace {

struct Target {
  std::pair<std::size_t, model::Sublayer> key;
  std::vector<std::size_t> kept;
  std::vector<double> weights;    // unperturbed kept weights, [n * k]
  std::vector<double> direction;  // u_j * w_j
  std::size_t k = 0;
};

std::vector<double> last_row(const Tensor& h) {
  const auto v = h.data();
  const std::size_t d = h.cols();
  return {v.end() - static_cast<std::ptrdiff_t>(d), v.end()};
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double PerturbationProbeResult::loglog_slope() const {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (eps[i] > 0.0 && residual_norm[i] > 0.0) {
      xs.push_back(std::log(eps[i]));
      ys.push_back(std::log(residual_norm[i]));
    }
  }
  if (xs.size() < 2) throw ContractError("slope needs two rungs with positive residual");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

PerturbationProbeResult perturbation_probe(const model::MixLoraModel& model,
                                           const std::vector<std::size_t>& tokens,
                                           const ProbeOptions& options) {
  if (options.eps.empty()) throw ContractError("empty eps ladder");
  for (std::size_t i = 0; i < options.eps.size(); ++i) {
    if (!(options.eps[i] >= 0.0)) throw ContractError(fmt::format("eps {} is negative", options.eps[i]));
    if (i > 0 && !(options.eps[i] < options.eps[i - 1])) {
      throw ContractError("eps ladder must be strictly decreasing");
    }
  }

  // Expert parameters stay put: nothing in the clone takes a gradient.
  auto m = model.clone();
  for (auto& p : m.parameters()) p.tensor.set_requires_grad(false);

  const auto batch = model::TokenBatch::single(tokens);
  const auto base = m.forward(batch);
  const auto f0 = last_row(base.final_hidden);

  std::mt19937_64 rng(options.direction_seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<Target> targets;
  for (const auto& rec : base.records) {
    const std::pair key{rec.layer, rec.sublayer};
    if (!options.targets.empty() && !options.targets.contains(key)) continue;
    Target t;
    t.key = key;
    t.kept = rec.routing.kept_indices;
    const auto w = rec.routing.kept_weights.data();
    t.weights.assign(w.begin(), w.end());
    t.k = rec.routing.top_k;
    for (double wj : t.weights) t.direction.push_back(unit(rng) * wj);
    targets.push_back(std::move(t));
  }
  if (targets.empty()) throw ContractError("no router matches the probe targets");

  // Directional derivative of the last hidden state along the offsets, one
  // backward pass per output coordinate.
  model::RoutingOverrides zero;
  std::vector<Tensor> leaves;
  for (const auto& t : targets) {
    leaves.push_back(Tensor::zeros({t.weights.size()}, true));
    zero[t.key] = {t.kept, leaves.back()};
  }
  const auto traced = m.forward(batch, {}, &zero);
  const std::size_t d = traced.final_hidden.cols();
  const std::size_t last = traced.final_hidden.rows() - 1;
  std::vector<double> jd(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    for (auto& leaf : leaves) leaf.zero_grad();
    ad::select(traced.final_hidden, last * d + c).backward();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto g = leaves[i].grad();
      for (std::size_t j = 0; j < g.size(); ++j) jd[c] += g[j] * targets[i].direction[j];
    }
  }

  PerturbationProbeResult out;
  for (double eps : options.eps) {
    model::RoutingOverrides ov;
    for (const auto& t : targets) {
      std::vector<double> off(t.direction.size());
      for (std::size_t j = 0; j < off.size(); ++j) off[j] = eps * t.direction[j];
      for (std::size_t row = 0; row * t.k < off.size(); ++row) {
        double mass = 0.0;
        for (std::size_t j = row * t.k; j < (row + 1) * t.k; ++j) mass += t.weights[j] + off[j];
        if (!(mass > 0.0 && mass <= 1.0)) {
          throw ContractError(fmt::format("eps {} moves the kept mass of layer {} {} token {} to {}", eps,
                                          t.key.first, model::sublayer_name(t.key.second), row, mass));
        }
      }
      const std::size_t n = off.size();
      ov[t.key] = {t.kept, Tensor::from({n}, std::move(off))};
    }
    const auto f = last_row(m.forward(batch, {}, &ov).final_hidden);
    std::vector<double> delta(d), lin(d), res(d);
    for (std::size_t c = 0; c < d; ++c) {
      delta[c] = f[c] - f0[c];
      lin[c] = eps * jd[c];
      res[c] = delta[c] - lin[c];
    }
    out.eps.push_back(eps);
    out.residual_norm.push_back(norm(res));
    out.linear_norm.push_back(norm(lin));
    out.delta_norm.push_back(norm(delta));
  }
  return out;
}

std::string probe_csv(const PerturbationProbeResult& r) {
  std::string out = "eps,residual_norm,linear_norm\n";
  for (std::size_t i = 0; i < r.eps.size(); ++i) {
    out += fmt::format("{},{},{}\n", r.eps[i], r.residual_norm[i], r.linear_norm[i]);
  }
  return out;
}

}  // namespace mixcal::oracles
