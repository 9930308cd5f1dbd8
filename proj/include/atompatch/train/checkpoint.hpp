#pragma once

// Flat JSON checkpoints: parameter name -> {shape, data}. Keys are sorted by
// the JSON library, and doubles round-trip exactly through its shortest
// representation, so a checkpoint is a deterministic function of the values.

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atompatch/core/errors.hpp"
#include "atompatch/core/params.hpp"

namespace atompatch {

inline constexpr const char* kCheckpointFormat = "atompatch.checkpoint.v1";

inline nlohmann::json checkpoint_to_json(const ParamRegistry& reg) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& it : reg.items) {
    nlohmann::json p;
    p["shape"] = it.second.shape();
    p["data"] = it.second.data();
    params[it.first] = std::move(p);
  }
  j["params"] = std::move(params);
  return j;
}

inline void save_checkpoint(const std::string& path, const ParamRegistry& reg) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << checkpoint_to_json(reg).dump(1) << "\n";
}

/// Loads values into every parameter present in `reg`; the file must cover
/// all of them with matching shapes. Extra parameters in the file are
/// ignored, which lets one full-model checkpoint serve partial loads.
inline void load_checkpoint(const std::string& path, ParamRegistry& reg) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw Error("checkpoint " + path + " is not valid JSON");
  }
  if (!j.contains("format") || j["format"] != kCheckpointFormat) {
    throw Error("checkpoint " + path + " has an unknown format");
  }
  const nlohmann::json& params = j["params"];
  for (auto& it : reg.items) {
    if (!params.contains(it.first)) {
      throw Error("checkpoint missing parameter " + it.first);
    }
    const nlohmann::json& p = params[it.first];
    const Shape shape = p["shape"].get<Shape>();
    if (shape != it.second.shape()) {
      throw Error("checkpoint parameter " + it.first + " has shape " + shape_str(shape) +
                  ", expected " + shape_str(it.second.shape()));
    }
    std::vector<double> data = p["data"].get<std::vector<double>>();
    it.second.data() = std::move(data);
  }
}

}  // namespace atompatch
