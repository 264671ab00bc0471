// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// A second forward pass over plain vectors, written without the autodiff
// library. It reads parameters by name from MixLoraModel::state() and is used
// as an independent oracle for the model.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "mixcal/model/config.hpp"

namespace mixcal::testing {

using Vec = std::vector<double>;
using State = std::map<std::string, std::vector<double>>;

// Row-major [rows x cols] times x.
inline Vec matvec(const Vec& w, std::size_t rows, std::size_t cols, const Vec& x) {
  Vec y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r] += w[r * cols + c] * x[c];
  return y;
}

inline Vec vadd(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

inline Vec vscale(Vec a, double c) {
  for (auto& x : a) x *= c;
  return a;
}

inline Vec ref_softmax(const Vec& z) {
  const double m = *std::max_element(z.begin(), z.end());
  Vec p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (auto& x : p) x /= s;
  return p;
}

inline Vec ref_layer_norm(const Vec& x, const Vec& gain, const Vec& bias, double eps) {
  const double n = static_cast<double>(x.size());
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps) * gain[i] + bias[i];
  return y;
}

inline double ref_gelu(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// Indices of the k largest entries; ties to the lower index.
inline std::vector<std::size_t> ref_topk(const Vec& p, std::size_t k) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
  idx.resize(k);
  return idx;
}

struct ReferenceModel {
  model::ModelConfig cfg;
  State s;

  const Vec& at(const std::string& name) const { return s.at(name); }

  // B (A x) * scale for one LoRA factor pair.
  Vec lora(const std::string& prefix, std::size_t in, std::size_t out, const Vec& x) const {
    const std::size_t r = cfg.lora_rank;
    const Vec ax = matvec(at(prefix + ".A"), r, in, x);
    return vscale(matvec(at(prefix + ".B"), out, r, ax), cfg.lora_scale() * cfg.lora_output_scale);
  }

  // Returns the kept (index, weight) pairs of one router.
  std::vector<std::pair<std::size_t, double>> route(const std::string& router, const Vec& x) const {
    const Vec p = ref_softmax(matvec(at(router), cfg.num_experts, cfg.hidden, x));
    std::vector<std::pair<std::size_t, double>> kept;
    for (auto e : ref_topk(p, cfg.top_k)) kept.emplace_back(e, p[e]);
    return kept;
  }

  Vec projection(std::size_t l, model::Sublayer sub, const Vec& x) const {
    const std::size_t d = cfg.hidden;
    const std::string p = fmt::format("layers.{}.{}", l, model::sublayer_name(sub));
    const Vec base = matvec(at(p + ".base"), d, d, x);
    if (!cfg.is_adapted(sub)) return base;
    Vec y(d, 0.0);
    for (auto [e, w] : route(p + ".router", x)) {
      const Vec expert = vadd(base, lora(fmt::format("{}.experts.{}", p, e), d, d, x));
      y = vadd(y, vscale(expert, w));
    }
    return y;
  }

  Vec ffn(std::size_t l, const Vec& x) const {
    const std::size_t d = cfg.hidden, f = cfg.ffn_hidden();
    const std::string p = fmt::format("layers.{}.ffn", l);
    const Vec up = matvec(at(p + ".up"), f, d, x);
    auto act = [](Vec u) {
      for (auto& v : u) v = ref_gelu(v);
      return u;
    };
    if (!cfg.is_adapted(model::Sublayer::kFfn)) return matvec(at(p + ".down"), d, f, act(up));
    Vec y(d, 0.0);
    for (auto [e, w] : route(p + ".router", x)) {
      const std::string ep = fmt::format("{}.experts.{}", p, e);
      const Vec a = act(vadd(up, lora(ep + ".up", d, f, x)));
      const Vec out = vadd(matvec(at(p + ".down"), d, f, a), lora(ep + ".down", f, d, a));
      y = vadd(y, vscale(out, w));
    }
    return y;
  }

  std::vector<Vec> block(std::size_t l, const std::vector<Vec>& h) const {
    const std::size_t d = cfg.hidden, n = h.size();
    const std::string p = fmt::format("layers.{}.", l);
    std::vector<Vec> q(n), k(n), v(n), out(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec xn = ref_layer_norm(h[t], at(p + "ln1.gain"), at(p + "ln1.bias"), cfg.ln_eps);
      q[t] = projection(l, model::Sublayer::kQuery, xn);
      k[t] = projection(l, model::Sublayer::kKey, xn);
      v[t] = projection(l, model::Sublayer::kValue, xn);
    }
    for (std::size_t t = 0; t < n; ++t) {
      Vec scores(t + 1);
      for (std::size_t j = 0; j <= t; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += q[t][c] * k[j][c];
        scores[j] = dot / std::sqrt(static_cast<double>(d));
      }
      const Vec a = ref_softmax(scores);
      Vec attn(d, 0.0);
      for (std::size_t j = 0; j <= t; ++j) attn = vadd(attn, vscale(v[j], a[j]));
      const Vec z = vadd(h[t], projection(l, model::Sublayer::kOutput, attn));
      const Vec zn = ref_layer_norm(z, at(p + "ln2.gain"), at(p + "ln2.bias"), cfg.ln_eps);
      out[t] = vadd(z, ffn(l, zn));
    }
    return out;
  }

  Vec logits(const std::vector<std::size_t>& tokens) const {
    const std::size_t d = cfg.hidden;
    std::vector<Vec> h(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      Vec e(at("embed").begin() + tokens[t] * d, at("embed").begin() + (tokens[t] + 1) * d);
      Vec ps(at("pos").begin() + t * d, at("pos").begin() + (t + 1) * d);
      h[t] = vadd(e, ps);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) h = block(l, h);
    const Vec hn = ref_layer_norm(h.back(), at("ln_f.gain"), at("ln_f.bias"), cfg.ln_eps);
    return vadd(matvec(at("head.weight"), cfg.classes, d, hn), at("head.bias"));
  }
};

}  // namespace mixcal::testing
