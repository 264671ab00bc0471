// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/oracles/decomposition.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

#include "mixcal/errors.hpp"

namespace mixcal::oracles {

Module Module::linear(Eigen::MatrixXd m) {
  Module out;
  out.matrix_ = std::move(m);
  return out;
}

Module Module::nonlinear(std::function<Eigen::VectorXd(const Eigen::VectorXd&)> f) {
  if (!f) throw ContractError("nonlinear module needs a callable");
  Module out;
  out.fn_ = std::move(f);
  return out;
}

Eigen::VectorXd Module::operator()(const Eigen::VectorXd& x) const {
  if (fn_) return fn_(x);
  if (matrix_.cols() != x.size()) {
    throw DimensionError(fmt::format("module takes {} inputs, got {}", matrix_.cols(), x.size()));
  }
  return matrix_ * x;
}

namespace {

std::size_t experts_per_layer(const Stack& experts) {
  if (experts.empty() || experts[0].empty()) throw DimensionError("empty expert stack");
  const std::size_t K = experts[0].size();
  for (std::size_t l = 0; l < experts.size(); ++l) {
    if (experts[l].size() != K) {
      throw DimensionError(fmt::format("layer {} has {} experts, layer 0 has {}", l, experts[l].size(), K));
    }
  }
  return K;
}

// K^L, or CapacityError once it passes the budget.
std::size_t path_count(std::size_t K, std::size_t L) {
  std::size_t n = 1;
  for (std::size_t l = 0; l < L; ++l) {
    if (n > kMaxPaths / K) throw CapacityError(fmt::format("{}^{} paths exceed the budget of {}", K, L, kMaxPaths));
    n *= K;
  }
  return n;
}

}  // namespace

std::vector<PathTerm> enumerate_paths(const Stack& experts, const std::vector<double>& path_weights,
                                      const Eigen::VectorXd& x) {
  const std::size_t K = experts_per_layer(experts);
  const std::size_t L = experts.size();
  const std::size_t n = path_count(K, L);
  if (path_weights.size() != n) {
    throw DimensionError(fmt::format("{} path weights for {} paths", path_weights.size(), n));
  }
  std::vector<PathTerm> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    auto& term = out[p];
    term.experts.assign(L, 0);
    std::size_t rest = p;
    for (std::size_t l = L; l-- > 0;) {
      term.experts[l] = rest % K;
      rest /= K;
    }
    term.weight = path_weights[p];
    if (!std::isfinite(term.weight)) throw ContractError(fmt::format("path weight {} is not finite", p));
    Eigen::VectorXd h = x;
    for (std::size_t l = 0; l < L; ++l) h = experts[l][term.experts[l]](h);
    term.output = std::move(h);
  }
  return out;
}

Eigen::VectorXd naive_decomposition_eval(const Stack& experts, const std::vector<double>& path_weights,
                                         const Eigen::VectorXd& x) {
  const auto paths = enumerate_paths(experts, path_weights, x);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(paths.front().output.size());
  for (const auto& p : paths) out += p.weight * p.output;
  return out;
}

Eigen::VectorXd hierarchical_eval(const Stack& experts, const std::vector<std::vector<double>>& layer_weights,
                                  const Eigen::VectorXd& x) {
  const std::size_t K = experts_per_layer(experts);
  if (layer_weights.size() != experts.size()) {
    throw DimensionError(fmt::format("{} weight rows for {} layers", layer_weights.size(), experts.size()));
  }
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l < experts.size(); ++l) {
    if (layer_weights[l].size() != K) throw DimensionError(fmt::format("layer {} weights need {} entries", l, K));
    Eigen::VectorXd next;
    for (std::size_t k = 0; k < K; ++k) {
      Eigen::VectorXd g = experts[l][k](h);
      if (k == 0) next = Eigen::VectorXd::Zero(g.size());
      next += layer_weights[l][k] * g;
    }
    h = std::move(next);
  }
  return h;
}

std::vector<double> product_path_weights(const std::vector<std::vector<double>>& layer_weights) {
  if (layer_weights.empty() || layer_weights[0].empty()) throw DimensionError("no layer weights");
  const std::size_t K = layer_weights[0].size();
  for (const auto& w : layer_weights) {
    if (w.size() != K) throw DimensionError("ragged layer weights");
  }
  std::vector<double> out{1.0};
  path_count(K, layer_weights.size());
  for (const auto& w : layer_weights) {
    std::vector<double> next;
    next.reserve(out.size() * K);
    for (double prefix : out) {
      for (double a : w) next.push_back(prefix * a);
    }
    out = std::move(next);
  }
  return out;
}

double check_hierarchical_naive_equivalence(const Stack& experts,
                                            const std::vector<std::vector<double>>& layer_weights,
                                            const Eigen::VectorXd& x) {
  for (const auto& layer : experts) {
    for (const auto& m : layer) {
      if (!m.is_linear()) throw ContractError("the two decompositions agree only for linear modules");
    }
  }
  const auto naive = naive_decomposition_eval(experts, product_path_weights(layer_weights), x);
  const auto hier = hierarchical_eval(experts, layer_weights, x);
  return (naive - hier).cwiseAbs().maxCoeff();
}

Stack random_linear_stack(std::size_t K, std::size_t L, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  Stack out(L);
  for (auto& layer : out) {
    for (std::size_t k = 0; k < K; ++k) {
      Eigen::MatrixXd m(dim, dim);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
      layer.push_back(Module::linear(std::move(m)));
    }
  }
  return out;
}

}  // namespace mixcal::oracles
