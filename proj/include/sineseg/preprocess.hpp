#pragma once

#include <span>
#include <utility>

#include <json.hpp>

#include "sineseg/volume.hpp"

namespace sineseg {

struct CtNormParams {
  double p_low = 0.05;
  double p_high = 99.5;
  double clip_low = 0.0;
  double clip_high = 0.0;
  double mean = 0.0;
  double std = 1.0;
};

struct PetNormParams {
  double min = 0.0;
  double max = 0.0;
  bool degenerate = false;  // max == min; output was all zeros
};

// Linear interpolation between order statistics:
// rank r = q/100 * (n-1), result = v[floor r] + frac(r) * (v[floor r + 1] - v[floor r]).
double percentile(std::span<const float> values, double q);

CtNormParams fit_ct_norm(const Volume& ct, double p_low = 0.05, double p_high = 99.5);
Volume normalize_ct(const Volume& ct, const CtNormParams& p);
std::pair<Volume, PetNormParams> normalize_pet(const Volume& pet);

nlohmann::json to_json(const CtNormParams& p);
nlohmann::json to_json(const PetNormParams& p);

}  // namespace sineseg
