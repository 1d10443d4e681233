#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sineseg/infer.hpp"
#include "sineseg/network.hpp"
#include "sineseg/preprocess.hpp"
#include "sineseg/sinenorm.hpp"
#include "sineseg/train.hpp"

namespace sineseg {

struct InferenceSettings {
  double budget_ms = 300000.0;
  double per_patch_ms = 0.0;  // 0: not given
  double sigma_scale = 1.0 / 8.0;
  PlannerConfig planner;
};

// Everything the command line can configure. The defaults are the
// full-scale configuration; `--config` overrides them and flags override
// the config file.
struct PipelineConfig {
  SineNormConfig sine;
  double ct_p_low = 0.05;
  double ct_p_high = 99.5;
  std::string network_preset = "full";  // full | toy | path to a JSON NetworkConfig
  Dims3 patch{112, 160, 128};
  TrainConfig train;
  InferenceSettings inference;

  void validate() const;
  NetworkConfig network() const;  // resolves network_preset
};

nlohmann::json to_json(const PipelineConfig& c);
// Applies every key present in j on top of c.
void update_from_json(PipelineConfig& c, const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

}  // namespace sineseg
