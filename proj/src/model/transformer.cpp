// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/model/transformer.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "mixcal/autodiff/ops.hpp"
#include "mixcal/errors.hpp"

namespace mixcal::model {

using namespace mixcal::ad;

TokenBatch TokenBatch::single(std::span<const std::size_t> tokens) {
  return TokenBatch{{tokens.begin(), tokens.end()}, {tokens.size()}};
}

TokenBatch TokenBatch::from(const std::vector<std::vector<std::size_t>>& sequences) {
  TokenBatch b;
  for (const auto& s : sequences) {
    b.tokens.insert(b.tokens.end(), s.begin(), s.end());
    b.lengths.push_back(s.size());
  }
  return b;
}

double RoutingDecision::kept_mass() const {
  return std::accumulate(kept_weights.begin(), kept_weights.end(), 0.0);
}

std::size_t ForwardTrace::row_offset(std::size_t example) const {
  if (example >= lengths.size()) throw IndexError(fmt::format("example {} of {}", example, lengths.size()));
  return std::accumulate(lengths.begin(), lengths.begin() + static_cast<std::ptrdiff_t>(example),
                         std::size_t{0});
}

RoutingDecision ForwardTrace::decision(std::size_t record, std::size_t example,
                                       std::size_t token) const {
  if (record >= records.size()) throw IndexError(fmt::format("record {} of {}", record, records.size()));
  if (token >= lengths.at(example)) throw IndexError(fmt::format("token {} of {}", token, lengths[example]));
  const Routing& r = records[record].routing;
  const std::size_t row = row_offset(example) + token;
  const std::size_t K = r.num_experts(), k = r.top_k;
  RoutingDecision d;
  d.full_probs.assign(r.probs.data().begin() + row * K, r.probs.data().begin() + (row + 1) * K);
  d.kept_indices.assign(r.kept_indices.begin() + row * k, r.kept_indices.begin() + (row + 1) * k);
  d.kept_weights.assign(r.kept_weights.data().begin() + row * k,
                        r.kept_weights.data().begin() + (row + 1) * k);
  return d;
}

std::size_t ForwardTrace::decision_count(std::size_t example) const {
  return records.size() * lengths.at(example);
}

MixLoraLinear& TransformerBlock::projection(Sublayer s) {
  switch (s) {
    case Sublayer::kQuery: return q;
    case Sublayer::kKey: return k;
    case Sublayer::kValue: return v;
    case Sublayer::kOutput: return o;
    case Sublayer::kFfn: break;
  }
  throw ContractError("the feed-forward sublayer is not a projection");
}

const MixLoraLinear& TransformerBlock::projection(Sublayer s) const {
  return const_cast<TransformerBlock*>(this)->projection(s);
}

Tensor TransformerBlock::forward(const Tensor& h, std::span<const std::size_t> lengths,
                                 const ForwardOptions& opts, double ln_eps, std::size_t layer,
                                 std::vector<RoutingRecord>* records,
                                 const RoutingOverrides* overrides) const {
  auto override_for = [&](Sublayer s) -> const RoutingOverride* {
    if (overrides == nullptr) return nullptr;
    auto it = overrides->find({layer, s});
    return it == overrides->end() ? nullptr : &it->second;
  };
  auto project = [&](const MixLoraLinear& proj, Sublayer s, const Tensor& x) {
    if (!proj.adapted()) return proj.forward(x, opts, nullptr);
    RoutingRecord rec{layer, s, {}};
    Tensor y = proj.forward(x, opts, &rec.routing, override_for(s));
    if (records) records->push_back(std::move(rec));
    return y;
  };

  const Tensor xn = layer_norm(h, ln1.gain, ln1.bias, ln_eps);
  const Tensor qh = project(q, Sublayer::kQuery, xn);
  const Tensor kh = project(k, Sublayer::kKey, xn);
  const Tensor vh = project(v, Sublayer::kValue, xn);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(h.cols()));
  const Tensor attn = causal_attention(qh, kh, vh, lengths, attn_scale);
  const Tensor z = add(h, project(o, Sublayer::kOutput, attn));

  const Tensor zn = layer_norm(z, ln2.gain, ln2.bias, ln_eps);
  Tensor f;
  if (ffn.adapted()) {
    RoutingRecord rec{layer, Sublayer::kFfn, {}};
    f = ffn.forward(zn, opts, &rec.routing, override_for(Sublayer::kFfn));
    if (records) records->push_back(std::move(rec));
  } else {
    f = ffn.forward(zn, opts, nullptr);
  }
  return add(z, f);
}

MixLoraModel::MixLoraModel(ModelConfig config, Tensor embed, Tensor pos,
                           std::vector<TransformerBlock> blocks, LayerNormParams final_ln,
                           Tensor head_weight, Tensor head_bias)
    : config_(std::move(config)),
      embed_(std::move(embed)),
      pos_(std::move(pos)),
      blocks_(std::move(blocks)),
      final_ln_(std::move(final_ln)),
      head_w_(std::move(head_weight)),
      head_b_(std::move(head_bias)) {}

ForwardTrace MixLoraModel::forward(const TokenBatch& batch, const ForwardOptions& opts,
                                   const RoutingOverrides* overrides) const {
  if (batch.size() == 0) throw ContractError("forward: empty batch");
  std::vector<std::size_t> positions;
  positions.reserve(batch.total_tokens());
  std::size_t covered = 0;
  for (auto len : batch.lengths) {
    if (len == 0 || len > config_.seq_len) {
      throw DimensionError(fmt::format("forward: sequence length {} outside [1, {}]", len,
                                       config_.seq_len));
    }
    for (std::size_t t = 0; t < len; ++t) positions.push_back(t);
    covered += len;
  }
  if (covered != batch.total_tokens()) {
    throw DimensionError("forward: sequence lengths do not cover the token list");
  }
  for (auto tok : batch.tokens) {
    if (tok >= config_.vocab) {
      throw IndexError(fmt::format("forward: token {} outside vocabulary of {}", tok, config_.vocab));
    }
  }

  ForwardTrace trace;
  trace.num_layers = config_.layers;
  trace.lengths = batch.lengths;
  Tensor h = add(gather_rows(embed_, batch.tokens), gather_rows(pos_, positions));
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    h = blocks_[l].forward(h, batch.lengths, opts, config_.ln_eps, l, &trace.records, overrides);
  }
  trace.final_hidden = h;
  const Tensor hn = layer_norm(h, final_ln_.gain, final_ln_.bias, config_.ln_eps);
  std::vector<std::size_t> last(batch.size());
  std::size_t off = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    off += batch.lengths[i];
    last[i] = off - 1;
  }
  trace.logits = add_bias(linear(gather_rows(hn, last), head_w_), head_b_);
  return trace;
}

std::vector<NamedParameter> MixLoraModel::parameters() const {
  std::vector<NamedParameter> out;
  auto frozen = [&](std::string name, const Tensor& t) {
    out.push_back({std::move(name), t, false, false});
  };
  auto trained = [&](std::string name, const Tensor& t, bool decay) {
    out.push_back({std::move(name), t, true, decay});
  };
  frozen("embed", embed_);
  frozen("pos", pos_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = fmt::format("layers.{}.", l);
    frozen(p + "ln1.gain", b.ln1.gain);
    frozen(p + "ln1.bias", b.ln1.bias);
    for (auto s : {Sublayer::kQuery, Sublayer::kKey, Sublayer::kValue, Sublayer::kOutput}) {
      const auto& proj = b.projection(s);
      const std::string pp = p + std::string(sublayer_name(s)) + ".";
      frozen(pp + "base", proj.base().weight());
      if (!proj.adapted()) continue;
      trained(pp + "router", proj.router().weight(), true);
      for (std::size_t e = 0; e < proj.experts().size(); ++e) {
        trained(fmt::format("{}experts.{}.A", pp, e), proj.experts()[e].a(), true);
        trained(fmt::format("{}experts.{}.B", pp, e), proj.experts()[e].b(), true);
      }
    }
    frozen(p + "ln2.gain", b.ln2.gain);
    frozen(p + "ln2.bias", b.ln2.bias);
    frozen(p + "ffn.up", b.ffn.up().weight());
    frozen(p + "ffn.down", b.ffn.down().weight());
    if (b.ffn.adapted()) {
      trained(p + "ffn.router", b.ffn.router().weight(), true);
      for (std::size_t e = 0; e < b.ffn.up_experts().size(); ++e) {
        const std::string ep = fmt::format("{}ffn.experts.{}.", p, e);
        trained(ep + "up.A", b.ffn.up_experts()[e].a(), true);
        trained(ep + "up.B", b.ffn.up_experts()[e].b(), true);
        trained(ep + "down.A", b.ffn.down_experts()[e].a(), true);
        trained(ep + "down.B", b.ffn.down_experts()[e].b(), true);
      }
    }
  }
  frozen("ln_f.gain", final_ln_.gain);
  frozen("ln_f.bias", final_ln_.bias);
  trained("head.weight", head_w_, false);
  trained("head.bias", head_b_, false);
  return out;
}

std::map<std::string, std::vector<double>> MixLoraModel::state() const {
  std::map<std::string, std::vector<double>> s;
  for (const auto& p : parameters()) {
    s.emplace(p.name, std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
  }
  return s;
}

void MixLoraModel::load_state(const std::map<std::string, std::vector<double>>& state) {
  auto params = parameters();
  for (auto& p : params) {
    auto it = state.find(p.name);
    if (it == state.end()) throw ConfigError(fmt::format("missing parameter '{}'", p.name));
    if (it->second.size() != p.tensor.numel()) {
      throw ConfigError(fmt::format("parameter '{}' has {} values, expected {}", p.name,
                                    it->second.size(), p.tensor.numel()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second.begin(), it->second.end(), dst.begin());
  }
  if (state.size() != params.size()) {
    for (const auto& [name, _] : state) {
      bool known = false;
      for (const auto& p : params) known = known || p.name == name;
      if (!known) throw ConfigError(fmt::format("unexpected parameter '{}'", name));
    }
  }
}

MixLoraModel MixLoraModel::clone() const {
  MixLoraModel copy = init_model(config_, 0);
  copy.load_state(state());
  return copy;
}

std::size_t MixLoraModel::adapter_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.name.find(".experts.") != std::string::npos) n += p.tensor.numel();
  }
  return n;
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor gaussian(Shape shape, double stddev, bool trainable) {
    std::vector<double> v(numel(shape));
    if (stddev > 0.0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& x : v) x = dist(rng_);
    }
    return Tensor::from(std::move(shape), std::move(v), trainable);
  }

 private:
  std::mt19937_64 rng_;
};

std::vector<LoraExpert> make_experts(Initializer& init, const ModelConfig& c, std::size_t in,
                                     std::size_t out) {
  std::vector<LoraExpert> experts;
  const double scale = c.lora_scale() * c.lora_output_scale;
  for (std::size_t e = 0; e < c.num_experts; ++e) {
    Tensor a = init.gaussian({c.lora_rank, in}, 1.0 / std::sqrt(static_cast<double>(in)), true);
    Tensor b = init.gaussian({out, c.lora_rank}, c.lora_b_std, true);
    experts.emplace_back(std::move(a), std::move(b), scale);
  }
  return experts;
}

}  // namespace

MixLoraModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  const std::size_t d = config.hidden;
  const double base_std = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor embed = init.gaussian({config.vocab, d}, config.embed_std, false);
  Tensor pos = init.gaussian({config.seq_len, d}, config.pos_std, false);
  auto ln = [&] {
    return LayerNormParams{Tensor::full({d}, 1.0), Tensor::zeros({d})};
  };

  std::vector<TransformerBlock> blocks(config.layers);
  for (auto& b : blocks) {
    b.ln1 = ln();
    b.ln2 = ln();
    for (auto s : {Sublayer::kQuery, Sublayer::kKey, Sublayer::kValue, Sublayer::kOutput}) {
      FrozenLinear base(init.gaussian({d, d}, base_std, false));
      if (config.is_adapted(s)) {
        auto experts = make_experts(init, config, d, d);
        TopKRouter router(init.gaussian({config.num_experts, d}, config.router_std, true),
                          config.top_k);
        b.projection(s) = MixLoraLinear(std::move(base), std::move(experts), std::move(router));
      } else {
        b.projection(s) = MixLoraLinear(std::move(base), {}, TopKRouter{});
      }
    }
    const std::size_t f = config.ffn_hidden();
    FrozenLinear up(init.gaussian({f, d}, base_std, false));
    FrozenLinear down(init.gaussian({d, f}, 1.0 / std::sqrt(static_cast<double>(f)), false));
    if (config.is_adapted(Sublayer::kFfn)) {
      auto up_e = make_experts(init, config, d, f);
      auto down_e = make_experts(init, config, f, d);
      TopKRouter router(init.gaussian({config.num_experts, d}, config.router_std, true),
                        config.top_k);
      b.ffn = MixLoraFfn(std::move(up), std::move(down), std::move(up_e), std::move(down_e),
                         std::move(router));
    } else {
      b.ffn = MixLoraFfn(std::move(up), std::move(down), {}, {}, std::nullopt);
    }
  }
  Tensor head_w = init.gaussian({config.classes, d}, config.head_std, true);
  Tensor head_b = Tensor::zeros({config.classes}, true);
  return MixLoraModel(config, std::move(embed), std::move(pos), std::move(blocks), ln(),
                      std::move(head_w), std::move(head_b));
}

}  // namespace mixcal::model
