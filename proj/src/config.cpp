#include "sineseg/config.hpp"

#include <fstream>

#include "sineseg/error.hpp"

namespace sineseg {

void PipelineConfig::validate() const {
  sine.validate();
  if (!(ct_p_low >= 0.0 && ct_p_low < ct_p_high && ct_p_high <= 100.0))
    throw ConfigError("CT percentiles must satisfy 0 <= low < high <= 100");
  for (Index p : patch)
    if (p < 1) throw ConfigError("patch dims must be positive");
  train.validate();
  if (!(inference.budget_ms > 0.0)) throw ConfigError("budget_ms must be > 0");
  if (inference.per_patch_ms < 0.0) throw ConfigError("per_patch_ms must be >= 0");
  if (!(inference.sigma_scale > 0.0)) throw ConfigError("sigma_scale must be > 0");
  inference.planner.validate();
}

NetworkConfig PipelineConfig::network() const {
  NetworkConfig n;
  if (network_preset == "full") {
    n = NetworkConfig::full();
  } else if (network_preset == "toy") {
    n = NetworkConfig::toy();
  } else {
    std::ifstream in(network_preset);
    if (!in) throw ConfigError("network preset '" + network_preset + "' is neither full, toy nor a readable file");
    try {
      n = network_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed network config file: " + std::string(e.what()));
    }
    return n;
  }
  n.input_channels = {"ct", "pet"};
  for (double a : sine.constants_a) n.input_channels.push_back(sine_channel_name(a));
  n.in_channels = static_cast<Index>(n.input_channels.size());
  return n;
}

nlohmann::json to_json(const PipelineConfig& c) {
  const auto& p = c.inference.planner;
  return {{"sine_constants", c.sine.constants_a},
          {"ct_percentiles", {c.ct_p_low, c.ct_p_high}},
          {"network", c.network_preset},
          {"patch", {c.patch[0], c.patch[1], c.patch[2]}},
          {"train", to_json(c.train)},
          {"inference",
           {{"budget_ms", c.inference.budget_ms},
            {"per_patch_ms", c.inference.per_patch_ms},
            {"sigma_scale", c.inference.sigma_scale},
            {"coverage_threshold", p.coverage_threshold},
            {"step_init", p.step_init},
            {"step_increment", p.step_increment},
            {"max_inplane_steps", p.max_inplane_steps},
            {"step_cap", p.step_cap}}}};
}

void update_from_json(PipelineConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  try {
    if (j.contains("sine_constants")) c.sine.constants_a = j.at("sine_constants").get<std::vector<double>>();
    if (j.contains("ct_percentiles")) {
      const auto v = j.at("ct_percentiles").get<std::vector<double>>();
      if (v.size() != 2) throw ConfigError("ct_percentiles must have 2 entries");
      c.ct_p_low = v[0];
      c.ct_p_high = v[1];
    }
    if (j.contains("network")) c.network_preset = j.at("network").get<std::string>();
    if (j.contains("patch")) {
      const auto v = j.at("patch").get<std::vector<Index>>();
      if (v.size() != 3) throw ConfigError("patch must have 3 entries");
      c.patch = {v[0], v[1], v[2]};
    }
    if (j.contains("train")) update_from_json(c.train, j.at("train"));
    if (j.contains("inference")) {
      const auto& i = j.at("inference");
      auto& p = c.inference.planner;
      c.inference.budget_ms = i.value("budget_ms", c.inference.budget_ms);
      c.inference.per_patch_ms = i.value("per_patch_ms", c.inference.per_patch_ms);
      c.inference.sigma_scale = i.value("sigma_scale", c.inference.sigma_scale);
      p.coverage_threshold = i.value("coverage_threshold", p.coverage_threshold);
      p.step_init = i.value("step_init", p.step_init);
      p.step_increment = i.value("step_increment", p.step_increment);
      p.max_inplane_steps = i.value("max_inplane_steps", p.max_inplane_steps);
      p.step_cap = i.value("step_cap", p.step_cap);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed pipeline config: ") + e.what());
  }
  c.validate();
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  PipelineConfig c;
  try {
    update_from_json(c, nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config JSON: " + std::string(e.what()));
  }
  return c;
}

}  // namespace sineseg
