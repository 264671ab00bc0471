// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "mixcal/data/task.hpp"
#include "mixcal/errors.hpp"
#include "mixcal/model/transformer.hpp"
#include "mixcal/oracles/decomposition.hpp"
#include "mixcal/oracles/probe.hpp"
#include "mixcal/oracles/prop1.hpp"

using namespace mixcal;
using namespace mixcal::oracles;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<std::vector<double>> random_layer_weights(std::size_t K, std::size_t L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> w(L, std::vector<double>(K));
  for (auto& row : w) {
    double s = 0.0;
    for (auto& a : row) s += (a = u(rng));
    for (auto& a : row) a /= s;
  }
  return w;
}

Eigen::VectorXd random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::VectorXd x(n);
  for (auto& v : x) v = g(rng);
  return x;
}

model::ModelConfig probe_config(std::size_t layers) {
  model::ModelConfig c;
  c.layers = layers;
  c.hidden = 16;
  c.num_experts = 4;
  c.top_k = 2;
  c.lora_rank = 2;
  c.lora_alpha = 2.0;
  c.lora_output_scale = 0.1;
  c.router_std = 0.1;
  c.lora_b_std = 0.5;
  c.vocab = 12;
  c.seq_len = 6;
  return c;
}

const std::vector<std::size_t> kTokens = {3, 1, 4, 1, 5, 9};

}  // namespace

TEST_CASE("naive and hierarchical decompositions", "[oracles][decomp]") {
  SECTION("agree for linear modules") {
    for (auto [K, L] : {std::pair<std::size_t, std::size_t>{2, 3}, {3, 2}, {2, 2}, {3, 3}}) {
      const auto stack = random_linear_stack(K, L, 4, 10 * K + L);
      const auto w = random_layer_weights(K, L, K + 100 * L);
      const auto x = random_vector(4, 7);
      INFO("K=" << K << " L=" << L);
      CHECK(check_hierarchical_naive_equivalence(stack, w, x) < 1e-10);

      // Collapsing each layer to one matrix first gives a third evaluation.
      Eigen::MatrixXd total = Eigen::MatrixXd::Identity(4, 4);
      for (std::size_t l = 0; l < L; ++l) {
        Eigen::MatrixXd layer = Eigen::MatrixXd::Zero(4, 4);
        for (std::size_t k = 0; k < K; ++k) layer += w[l][k] * stack[l][k].matrix();
        total = layer * total;
      }
      CHECK((hierarchical_eval(stack, w, x) - total * x).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SECTION("one-hot weights select a single path") {
    const auto stack = random_linear_stack(3, 2, 4, 5);
    const std::vector<std::vector<double>> w = {{0, 1, 0}, {0, 0, 1}};
    const auto x = random_vector(4, 8);
    const Eigen::VectorXd path = stack[1][2](stack[0][1](x));
    CHECK((hierarchical_eval(stack, w, x) - path).cwiseAbs().maxCoeff() == 0.0);
    CHECK((naive_decomposition_eval(stack, product_path_weights(w), x) - path).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("enumeration is complete with layer 1 most significant") {
    const auto stack = random_linear_stack(3, 3, 2, 1);
    const auto paths = enumerate_paths(stack, std::vector<double>(27, 1.0), random_vector(2, 1));
    REQUIRE(paths.size() == 27);
    std::set<std::vector<std::size_t>> seen;
    for (const auto& p : paths) seen.insert(p.experts);
    CHECK(seen.size() == 27);
    CHECK(paths[1].experts == std::vector<std::size_t>{0, 0, 1});
    CHECK(paths[9].experts == std::vector<std::size_t>{1, 0, 0});
  }

  SECTION("errors") {
    const auto x = random_vector(2, 1);
    CHECK_THROWS_AS(naive_decomposition_eval(random_linear_stack(2, 13, 2, 1), std::vector<double>(8192, 0.0), x),
                    CapacityError);
    CHECK_NOTHROW(naive_decomposition_eval(random_linear_stack(2, 12, 2, 1), std::vector<double>(4096, 0.0), x));
    CHECK_THROWS_AS(naive_decomposition_eval(random_linear_stack(2, 2, 2, 1), {1.0, 0.0, 0.0}, x), DimensionError);

    Stack nonlinear(2);
    for (auto& layer : nonlinear) {
      for (int k = 0; k < 2; ++k) {
        layer.push_back(Module::nonlinear([](const Eigen::VectorXd& v) -> Eigen::VectorXd { return v.array().tanh(); }));
      }
    }
    CHECK_THROWS_AS(check_hierarchical_naive_equivalence(nonlinear, {{0.5, 0.5}, {0.5, 0.5}}, x), ContractError);
    // Both still evaluate; they simply differ.
    const auto h = hierarchical_eval(nonlinear, {{0.5, 0.5}, {0.5, 0.5}}, x);
    const auto n = naive_decomposition_eval(nonlinear, {0.25, 0.25, 0.25, 0.25}, x);
    CHECK((h - n).norm() >= 0.0);
  }
}

TEST_CASE("perturbation probe", "[oracles][probe]") {
  SECTION("zero eps gives zero residual") {
    const auto m = model::init_model(probe_config(2), 3);
    const auto r = perturbation_probe(m, kTokens, {{0.1, 0.0}, 4, {}});
    CHECK(r.residual_norm[1] == 0.0);
    CHECK(r.linear_norm[1] == 0.0);
    CHECK(r.residual_norm[0] > 0.0);
  }

  SECTION("a single FFN mixture is exactly linear in its weights") {
    const auto m = model::init_model(probe_config(1), 5);
    ProbeOptions opt;
    opt.targets = {{0, model::Sublayer::kFfn}};
    const auto r = perturbation_probe(m, kTokens, opt);
    for (std::size_t i = 0; i < r.eps.size(); ++i) {
      INFO("eps " << r.eps[i]);
      CHECK(r.residual_norm[i] <= 1e-13 * std::max(1.0, r.linear_norm[i] / r.eps[i]));
    }
  }

  SECTION("residual is second order on a four-layer model") {
    const auto m = model::init_model(probe_config(4), 11);
    const auto r = perturbation_probe(m, kTokens);
    CHECK(r.loglog_slope() >= 1.8);

    ProbeOptions halving;
    halving.eps = {0.08, 0.04, 0.02, 0.01};
    const auto h = perturbation_probe(m, kTokens, halving);
    for (std::size_t i = 1; i < h.eps.size(); ++i) {
      const double ratio = h.residual_norm[i - 1] / h.residual_norm[i];
      INFO("rung " << i << " ratio " << ratio);
      CHECK(ratio >= 2.5);
      CHECK(ratio <= 6.5);
    }
  }

  SECTION("contract errors") {
    const auto m = model::init_model(probe_config(1), 2);
    CHECK_THROWS_AS(perturbation_probe(m, kTokens, {{1e-2, 1e-1}, 0, {}}), ContractError);
    CHECK_THROWS_AS(perturbation_probe(m, kTokens, {{-1e-2}, 0, {}}), ContractError);
    CHECK_THROWS_AS(perturbation_probe(m, kTokens, {{1e3}, 0, {}}), ContractError);
    CHECK_THROWS_AS(perturbation_probe(m, kTokens, {{1e-2}, 0, {{5, model::Sublayer::kFfn}}}), ContractError);
  }

  SECTION("csv") {
    PerturbationProbeResult r{{0.1, 0.01}, {1e-3, 1e-5}, {0.5, 0.05}, {0.5, 0.05}};
    CHECK(probe_csv(r) == "eps,residual_norm,linear_norm\n0.1,0.001,0.5\n0.01,1e-05,0.05\n");
    CHECK_THAT(r.loglog_slope(), WithinAbs(2.0, 1e-12));
  }
}

TEST_CASE("calibration risk minimizer", "[oracles][prop1]") {
  for (int i = 0; i <= 20; ++i) {
    const double p = i / 20.0;
    const auto m = calibration_minimizer_oracle(p);
    INFO("p = " << p);
    CHECK(std::abs(m.u_star - p) <= 1e-4);
    CHECK_THAT(m.risk, WithinAbs(p * (1 - p), 1e-8));
  }
  CHECK(calibration_minimizer_oracle(0.0).u_star == 0.0);
  CHECK(calibration_minimizer_oracle(1.0).u_star == 1.0);
  CHECK_THROWS_AS(calibration_minimizer_oracle(-0.1), ContractError);
  CHECK_THROWS_AS(calibration_minimizer_oracle(1.5), ContractError);
}

TEST_CASE("spearman and the empirical check", "[oracles][prop1]") {
  const std::vector<double> a = {1, 2, 3, 4}, b = {10, 20, 30, 40}, c = {4, 3, 2, 1};
  CHECK_THAT(spearman(a, b), WithinAbs(1.0, 1e-15));
  CHECK_THAT(spearman(a, c), WithinAbs(-1.0, 1e-15));
  // ranks {1, 2.5, 2.5, 4} vs {1, 2, 3, 4}
  const std::vector<double> tied = {1, 2, 2, 3};
  CHECK_THAT(spearman(tied, a), WithinAbs(4.5 / std::sqrt(4.5 * 5.0), 1e-15));
  CHECK(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}) == 0.0);
  CHECK_THROWS_AS(spearman(a, std::vector<double>{1, 2}), DimensionError);

  data::TaskSpec s;
  s.train_size = 0;
  s.val_size = 200;
  s.test_size = 0;
  model::ModelConfig mc;
  mc.layers = 1;
  mc.hidden = 8;
  const auto m = model::init_model(mc, 1);
  const auto rep = empirical_prop1_check(m, data::generate_task(s, 1));
  CHECK(rep.regimes.size() == 4);
  CHECK(rep.spearman >= -1.0);
  CHECK(rep.spearman <= 1.0);
}
