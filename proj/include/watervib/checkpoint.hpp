#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "watervib/model.hpp"

namespace watervib {

// Weight checkpoint: a JSON document with a header (L, H, W, D, alpha, beta,
// logvar_clip, vib_enabled, seed) and a map from parameter names to
// {shape, data}. Doubles round-trip bit-exactly through the shortest-decimal
// JSON encoding.

inline nlohmann::json checkpoint_json(const WatermarkModel& m) {
  nlohmann::json j;
  j["format"] = "watervib-checkpoint-v1";
  j["header"] = {{"L", m.msg_bits},
                 {"H", m.img_h},
                 {"W", m.img_w},
                 {"D", m.vib.latent_dim},
                 {"alpha", m.vib.alpha},
                 {"beta", m.vib.beta},
                 {"logvar_clip", m.vib.logvar_clip},
                 {"vib_enabled", m.vib.enabled},
                 {"seed", m.init_seed}};
  nlohmann::json params = nlohmann::json::object();
  for (const auto& p : m.params) params[p.name] = {{"shape", p.shape}, {"data", p.data}};
  j["params"] = params;
  return j;
}

inline void save_checkpoint(const std::string& path, const WatermarkModel& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << checkpoint_json(m).dump(1) << '\n';
}

inline WatermarkModel model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "watervib-checkpoint-v1")
    throw std::runtime_error("checkpoint: unknown format");
  const auto& h = j.at("header");
  VIBConfig vib;
  vib.latent_dim = h.at("D").get<int>();
  vib.alpha = h.at("alpha").get<double>();
  vib.beta = h.at("beta").get<double>();
  vib.logvar_clip = h.at("logvar_clip").get<double>();
  vib.enabled = h.at("vib_enabled").get<bool>();
  WatermarkModel m = init_model(h.at("L").get<int>(), h.at("H").get<int>(),
                                h.at("W").get<int>(), vib, h.at("seed").get<std::uint64_t>());
  const auto& params = j.at("params");
  for (auto& p : m.params) {
    if (!params.contains(p.name)) throw std::runtime_error("checkpoint: missing " + p.name);
    const auto& jp = params.at(p.name);
    const auto shape = jp.at("shape").get<ad::Shape>();
    if (shape != p.shape) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.data = jp.at("data").get<std::vector<double>>();
    if (p.data.size() != ad::numel(p.shape))
      throw std::runtime_error("checkpoint: data size mismatch for " + p.name);
    for (double v : p.data)
      if (!std::isfinite(v)) throw std::runtime_error("checkpoint: non-finite weight in " + p.name);
  }
  return m;
}

inline WatermarkModel load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  f >> j;
  return model_from_json(j);
}

}  // namespace watervib
