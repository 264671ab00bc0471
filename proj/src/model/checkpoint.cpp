// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <sodium.h>

#include "mixcal/errors.hpp"

namespace mixcal::model {

using nlohmann::json;

namespace {

std::vector<unsigned char> to_le_bytes(std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * sizeof(double));
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (std::size_t b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return bytes;
}

}  // namespace

std::string encode_f64_base64(std::span<const double> values) {
  const auto bytes = to_le_bytes(values);
  const int variant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_ENCODED_LEN(bytes.size(), variant), '\0');
  sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), variant);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<double> decode_f64_base64(const std::string& text) {
  std::vector<unsigned char> bytes(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  if (sodium_base642bin(bytes.data(), bytes.size(), text.data(), text.size(), nullptr, &len,
                        nullptr, sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw ParseError("invalid base64 parameter data", 0);
  }
  if (len % 8 != 0) throw ParseError(fmt::format("parameter data of {} bytes", len), 0);
  std::vector<double> values(len / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[i * 8 + b]} << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

json checkpoint_to_json(const MixLoraModel& model, std::uint64_t seed, std::uint64_t step) {
  json params = json::object();
  for (const auto& p : model.parameters()) {
    params[p.name] = {{"shape", p.tensor.shape()}, {"data", encode_f64_base64(p.tensor.data())}};
  }
  return json{{"format", "mixcal-checkpoint"},
              {"version", kCheckpointVersion},
              {"seed", seed},
              {"step", step},
              {"config", model.config()},
              {"params", std::move(params)}};
}

Checkpoint checkpoint_from_json(const json& doc) {
  try {
    if (doc.at("format") != "mixcal-checkpoint") throw ParseError("not a mixcal checkpoint", 0);
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw ParseError(fmt::format("unsupported checkpoint version {}", version), 0);
    }
    Checkpoint ck;
    ck.seed = doc.at("seed").get<std::uint64_t>();
    ck.step = doc.at("step").get<std::uint64_t>();
    const auto config = doc.at("config").get<ModelConfig>();
    ck.model = init_model(config, 0);
    std::map<std::string, std::vector<double>> state;
    for (const auto& [name, entry] : doc.at("params").items()) {
      auto values = decode_f64_base64(entry.at("data").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (ad::numel(shape) != values.size()) {
        throw ParseError(fmt::format("parameter '{}' data does not match its shape", name), 0);
      }
      state.emplace(name, std::move(values));
    }
    ck.model.load_state(state);
    return ck;
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("malformed checkpoint: {}", e.what()), 0);
  }
}

void save_checkpoint(const std::filesystem::path& path, const MixLoraModel& model,
                     std::uint64_t seed, std::uint64_t step) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << checkpoint_to_json(model, seed, step).dump(1) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()), 0);
  }
  return checkpoint_from_json(doc);
}

}  // namespace mixcal::model
