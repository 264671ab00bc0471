// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mixcal/autodiff/grad_check.hpp"
#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"
#include "test_support.hpp"

using namespace mixcal;
using namespace mixcal::ad;
using Catch::Matchers::WithinAbs;
using mixcal::testing::random_tensor;

namespace {

// Independent triple loop.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i, p) * b.at(p, j);
  return out;
}

// Weighted sum with fixed random weights so every output entry contributes
// a generic gradient.
Tensor probe_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(rng, y.shape())));
}

}  // namespace

TEST_CASE("matmul examples", "[autodiff][matmul]") {
  const auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto id = matmul(eye, m);
  CHECK(std::vector<double>(id.data().begin(), id.data().end()) == std::vector<double>{1, 2, 3, 4});

  auto z = matmul(m, Tensor::zeros({2, 1}));
  CHECK(z.shape() == Shape{2, 1});
  CHECK(z.at(0) == 0.0);
  CHECK(z.at(1) == 0.0);

  auto r = matmul(m, Tensor::from({2, 1}, {5, 6}));
  const auto expected = naive_matmul(m, Tensor::from({2, 1}, {5, 6}));
  CHECK(expected == std::vector<double>{17, 39});
  CHECK(r.at(0) == 17.0);
  CHECK(r.at(1) == 39.0);

  std::mt19937_64 rng(7);
  auto a = random_tensor(rng, {5, 3});
  auto b = random_tensor(rng, {3, 4});
  CHECK(testing::max_abs_diff(matmul(a, b).data(), naive_matmul(a, b)) < 1e-14);
}

TEST_CASE("matmul shape mismatch names both shapes", "[autodiff][matmul]") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples", "[autodiff][softmax]") {
  for (double c : {-50.0, 0.0, 3.5, 700.0}) {
    auto s = softmax(Tensor::full({4}, c));
    for (double p : s.data()) CHECK(p == 0.25);
  }
  auto s = softmax(Tensor::from({2}, {2.0, 0.0}));
  CHECK_THAT(s.at(0), WithinAbs(0.880797077977882444, 1e-15));
  CHECK_THAT(s.at(1), WithinAbs(0.119202922022117556, 1e-15));

  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    // dyadic grid so that the shift below is exact
    auto v = random_tensor(rng, {9}, 5.0);
    for (auto& x : v.mutable_data()) x = std::ldexp(std::round(std::ldexp(x, 20)), -20);
    auto p = softmax(v);
    double total = 0.0;
    for (double x : p.data()) {
      CHECK(x > 0.0);
      total += x;
    }
    CHECK_THAT(total, WithinAbs(1.0, 1e-12));
    std::vector<double> shifted(v.data().begin(), v.data().end());
    for (auto& x : shifted) x += 123.25;
    auto q = softmax(Tensor::from({9}, shifted));
    CHECK(testing::max_abs_diff(p.data(), q.data()) == 0.0);
  }
  CHECK_THROWS_AS(softmax(Tensor::from({2}, {1.0, NAN})), NumericError);
}

TEST_CASE("layer_norm examples", "[autodiff][layer_norm]") {
  const auto ones = Tensor::full({4}, 1.0);
  const auto zeros = Tensor::zeros({4});
  auto y = layer_norm(Tensor::full({4}, 3.0), ones, zeros);
  for (double x : y.data()) CHECK(x == 0.0);

  auto u = layer_norm(Tensor::from({2}, {1.0, -1.0}), Tensor::full({2}, 1.0), Tensor::zeros({2}),
                      1e-300);
  CHECK_THAT(u.at(0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(u.at(1), WithinAbs(-1.0, 1e-15));

  std::mt19937_64 rng(3);
  auto bias = random_tensor(rng, {4});
  auto w = layer_norm(random_tensor(rng, {4}), Tensor::zeros({4}), bias);
  for (std::size_t i = 0; i < 4; ++i) CHECK(w.at(i) == bias.at(i));
}

TEST_CASE("cross_entropy examples", "[autodiff][cross_entropy]") {
  CHECK_THAT(cross_entropy(Tensor::zeros({4}), 1).item(), WithinAbs(1.386294361119890619, 1e-15));
  CHECK_THAT(cross_entropy(Tensor::from({2}, {30.0, -30.0}), 0).item(), WithinAbs(0.0, 1e-25));
  CHECK_THAT(cross_entropy(Tensor::from({3}, {1, 2, 3}), 2).item(),
             WithinAbs(0.407605964444380304, 1e-15));
  CHECK_THROWS_AS(cross_entropy(Tensor::from({3}, {1, 2, 3}), 3), IndexError);
  // Saturated wrong label stays finite.
  CHECK_THAT(cross_entropy(Tensor::from({2}, {800.0, -800.0}), 1).item(), WithinAbs(1600.0, 1e-9));
}

TEST_CASE("backward examples", "[autodiff][backward]") {
  auto w = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(w).backward();
  for (double g : w.grad()) CHECK(g == 1.0);

  auto v = Tensor::from({3}, {1, 2, 3}, true);
  sum(mul(v, v)).backward();
  CHECK(v.grad() == std::vector<double>{2, 4, 6});

  auto logits = Tensor::from({3}, {0.3, -1.2, 0.8}, true);
  const double err = grad_check([&] { return cross_entropy(logits, 1); }, {logits});
  CHECK(err < 1e-6);

  CHECK_THROWS_AS(w.backward(), ContractError);
}

TEST_CASE("backward accumulates over fan-out and repeated calls", "[autodiff][backward]") {
  auto y = Tensor::from({1}, {2.5}, true);
  auto root = add(y, y);
  root.backward();
  CHECK(y.grad()[0] == 2.0);
  root.backward();
  CHECK(y.grad()[0] == 4.0);
  y.zero_grad();
  auto prod = mul(add(y, y), y);  // 2y^2
  prod.backward();
  CHECK(y.grad()[0] == 10.0);
}

TEST_CASE("grad_check examples", "[autodiff][grad_check]") {
  std::mt19937_64 rng(5);
  auto m = random_tensor(rng, {4, 4});
  auto x = random_tensor(rng, {4, 1}, 1.0, true);
  // x^T M x
  auto quad = [&] { return sum(mul(x, matmul(m, x))); };
  CHECK(grad_check(quad, {x}) < 1e-9);

  auto c = Tensor::from({3}, {1, 2, 3}, true);
  auto constant = [&] { return sum(Tensor::full({2}, 4.0)); };
  CHECK(grad_check(constant, {c}) == 0.0);

  CHECK_THROWS_AS(grad_check(quad, {x}, 1e-2), ContractError);
  CHECK_THROWS_AS(grad_check(quad, {x}, 1e-9), ContractError);

  int calls = 0;
  auto flaky = [&] { return sum(scale(x, static_cast<double>(++calls))); };
  CHECK_THROWS_AS(grad_check(flaky, {x}), ContractError);
}

TEST_CASE("every primitive matches central differences", "[autodiff][property]") {
  std::mt19937_64 rng(2026);
  for (int trial = 0; trial < 5; ++trial) {
    const std::uint64_t s = 100 + trial;
    auto a = random_tensor(rng, {3, 4}, 1.0, true);
    auto b = random_tensor(rng, {4, 2}, 1.0, true);
    auto c = random_tensor(rng, {3, 4}, 1.0, true);
    auto w = random_tensor(rng, {5, 4}, 1.0, true);
    auto g = random_tensor(rng, {3}, 1.0, true);
    auto gain = random_tensor(rng, {4}, 1.0, true);
    auto bias = random_tensor(rng, {4}, 1.0, true);
    auto seg_x = random_tensor(rng, {5, 3}, 1.0, true);
    auto seg_k = random_tensor(rng, {5, 3}, 1.0, true);
    auto seg_v = random_tensor(rng, {5, 3}, 1.0, true);
    const std::vector<std::size_t> segs = {2, 3};
    const std::vector<std::size_t> rows = {2, 0, 2};
    const std::vector<std::size_t> labels = {1, 3, 0};

    struct Case {
      const char* name;
      std::function<Tensor()> f;
      std::vector<Tensor> params;
    };
    const std::vector<Case> cases = {
        {"matmul", [&] { return probe_sum(matmul(a, b), s); }, {a, b}},
        {"linear", [&] { return probe_sum(linear(a, w), s); }, {a, w}},
        {"add", [&] { return probe_sum(add(a, c), s); }, {a, c}},
        {"sub", [&] { return probe_sum(sub(a, c), s); }, {a, c}},
        {"mul", [&] { return probe_sum(mul(a, c), s); }, {a, c}},
        {"scale", [&] { return probe_sum(scale(a, -1.7), s); }, {a}},
        {"square", [&] { return probe_sum(square(a), s); }, {a}},
        {"gelu", [&] { return probe_sum(gelu(a), s); }, {a}},
        {"add_bias", [&] { return probe_sum(add_bias(a, bias), s); }, {a, bias}},
        {"scale_rows", [&] { return probe_sum(scale_rows(a, g), s); }, {a, g}},
        {"sum_rows", [&] { return probe_sum(sum_rows(a), s); }, {a}},
        {"mean", [&] { return scale(mean(mul(a, c)), 3.0); }, {a, c}},
        {"softmax", [&] { return probe_sum(softmax(a), s); }, {a}},
        {"log_softmax", [&] { return probe_sum(log_softmax(a), s); }, {a}},
        {"layer_norm", [&] { return probe_sum(layer_norm(a, gain, bias), s); }, {a, gain, bias}},
        {"cross_entropy_rows", [&] { return cross_entropy_rows(a, labels); }, {a}},
        {"gather_rows", [&] { return probe_sum(gather_rows(a, rows), s); }, {a}},
        {"scatter_rows", [&] { return probe_sum(scatter_rows(a, rows, 4), s); }, {a}},
        {"gather_elements",
         [&] { return probe_sum(gather_elements(a, rows, std::vector<std::size_t>{3, 1, 0}), s); },
         {a}},
        {"causal_attention",
         [&] { return probe_sum(causal_attention(seg_x, seg_k, seg_v, segs, 0.7), s); },
         {seg_x, seg_k, seg_v}},
        {"segment_mean", [&] { return probe_sum(segment_mean(sum_rows(seg_x), segs), s); }, {seg_x}},
        {"select", [&] { return square(select(a, 5)); }, {a}},
    };
    for (const auto& c : cases) {
      INFO(c.name << " trial " << trial);
      CHECK(grad_check(c.f, c.params) < 1e-6);
    }
  }
}

TEST_CASE("outputs stay finite at saturated inputs", "[autodiff]") {
  auto big = Tensor::from({1, 4}, {1e3, -1e3, 5e2, 0.0}, true);
  auto p = softmax(big);
  auto lp = log_softmax(big);
  auto ce = cross_entropy_rows(big, std::vector<std::size_t>{1});
  for (double x : p.data()) CHECK(std::isfinite(x));
  for (double x : lp.data()) CHECK(std::isfinite(x));
  CHECK(std::isfinite(ce.item()));
  ce.backward();
  for (double x : big.grad()) CHECK(std::isfinite(x));
}

TEST_CASE("topk ties go to the lower index", "[autodiff][topk]") {
  auto x = Tensor::from({2, 4}, {0.1, 0.4, 0.4, 0.1, 0.25, 0.25, 0.25, 0.25});
  CHECK(topk_rows(x, 2) == std::vector<std::size_t>{1, 2, 0, 1});
  CHECK(argmax_rows(x) == std::vector<std::size_t>{1, 0});
}

TEST_CASE("NoGradGuard records constants", "[autodiff][nograd]") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  CHECK(ad::grad_enabled());
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_enabled());
    {
      ad::NoGradGuard nested;
      CHECK_FALSE(ad::grad_enabled());
    }
    CHECK_FALSE(ad::grad_enabled());
    const auto y = ad::sum(ad::square(x));
    CHECK(y.item() == 5.0);
    CHECK(ad::graph_size(y) == 1);
  }
  CHECK(ad::grad_enabled());
  const auto y = ad::sum(ad::square(x));
  CHECK(ad::graph_size(y) > 1);
  y.backward();
  CHECK(x.grad() == std::vector<double>{2.0, 4.0});
}

TEST_CASE("grad_check reports whole-tensor error", "[autodiff][gradcheck]") {
  auto x = Tensor::from({3}, {0.3, -1.2, 2.0}, true);
  const auto res = ad::grad_check_detailed([&] { return ad::sum(ad::mul(ad::square(x), x)); }, {x});
  CHECK(res.max_tensor_rel_error < 1e-8);
  CHECK(res.max_tensor_rel_error <= res.max_rel_error + 1e-15);
}
