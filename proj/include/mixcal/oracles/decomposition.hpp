// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two ways to evaluate an L-layer stack of K-expert mixtures.
//
// Naive: sum over all K^L paths (k1, ..., kL) of a path weight times the
// composition g^L_{kL}(... g^1_{k1}(x)). Paths are indexed with layer 1 as
// the most significant base-K digit.
//
// Hierarchical: h <- sum_k a^l_k g^l_k(h), layer by layer. For linear maps it
// equals the naive sum with product path weights prod_l a^l_{kl}.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace mixcal::oracles {

inline constexpr std::size_t kMaxPaths = 4096;

class Module {
 public:
  static Module linear(Eigen::MatrixXd m);
  static Module nonlinear(std::function<Eigen::VectorXd(const Eigen::VectorXd&)> f);

  bool is_linear() const { return !fn_; }
  const Eigen::MatrixXd& matrix() const { return matrix_; }
  Eigen::VectorXd operator()(const Eigen::VectorXd& x) const;

 private:
  Eigen::MatrixXd matrix_;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> fn_;
};

// experts[l][k] is module k of layer l.
using Stack = std::vector<std::vector<Module>>;

struct PathTerm {
  std::vector<std::size_t> experts;  // one index per layer
  double weight = 0.0;
  Eigen::VectorXd output;  // unweighted composition
};

// Every path with its weight and composed output. CapacityError when K^L
// exceeds kMaxPaths; DimensionError for ragged layers or a weight count other
// than K^L.
std::vector<PathTerm> enumerate_paths(const Stack& experts, const std::vector<double>& path_weights,
                                      const Eigen::VectorXd& x);

Eigen::VectorXd naive_decomposition_eval(const Stack& experts, const std::vector<double>& path_weights,
                                         const Eigen::VectorXd& x);

// layer_weights[l][k] = a^l_k.
Eigen::VectorXd hierarchical_eval(const Stack& experts, const std::vector<std::vector<double>>& layer_weights,
                                  const Eigen::VectorXd& x);
std::vector<double> product_path_weights(const std::vector<std::vector<double>>& layer_weights);

// Max abs difference between the two evaluations. ContractError if any
// module is nonlinear.
double check_hierarchical_naive_equivalence(const Stack& experts,
                                            const std::vector<std::vector<double>>& layer_weights,
                                            const Eigen::VectorXd& x);

// K random dim x dim Gaussian maps per layer, scaled by 1/sqrt(dim).
Stack random_linear_stack(std::size_t K, std::size_t L, std::size_t dim, std::uint64_t seed);

}  // namespace mixcal::oracles
