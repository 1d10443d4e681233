#include "sineseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "sineseg/error.hpp"

namespace sineseg {

namespace {

double percentile_sorted(const std::vector<float>& v, double q) {
  const double r = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(r));
  const double frac = r - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return double(v[lo]) + frac * (double(v[lo + 1]) - double(v[lo]));
}

}  // namespace

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw PreconditionError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw PreconditionError("percentile q must lie in [0, 100]");
  std::vector<float> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return percentile_sorted(sorted, q);
}

CtNormParams fit_ct_norm(const Volume& ct, double p_low, double p_high) {
  if (ct.size() == 0) throw PreconditionError("cannot fit CT normalization on an empty volume");
  if (ct.meta.modality != Modality::CT) throw PreconditionError("fit_ct_norm expects a CT volume");
  if (!(p_low < p_high)) throw PreconditionError("p_low must be below p_high");

  CtNormParams p;
  p.p_low = p_low;
  p.p_high = p_high;
  std::vector<float> sorted(ct.voxels.data(), ct.voxels.data() + ct.size());
  std::sort(sorted.begin(), sorted.end());
  p.clip_low = percentile_sorted(sorted, p_low);
  p.clip_high = percentile_sorted(sorted, p_high);

  const Eigen::ArrayXd clipped = ct.voxels.cast<double>().array().max(p.clip_low).min(p.clip_high);
  p.mean = clipped.mean();
  p.std = std::sqrt((clipped - p.mean).square().mean());
  if (p.std < 1e-8) p.std = 1.0;
  return p;
}

Volume normalize_ct(const Volume& ct, const CtNormParams& p) {
  if (!(p.clip_low <= p.clip_high) || !(p.std > 0.0)) throw PreconditionError("invalid CT normalization params");
  Volume out(ct.meta);
  out.meta.modality = Modality::DERIVED;
  out.meta.intensity_units = "zscore";
  out.voxels = ((ct.voxels.cast<double>().array().max(p.clip_low).min(p.clip_high) - p.mean) / p.std)
                   .cast<float>()
                   .matrix();
  return out;
}

std::pair<Volume, PetNormParams> normalize_pet(const Volume& pet) {
  if (pet.meta.modality != Modality::PET) throw PreconditionError("normalize_pet expects a PET volume");
  if (pet.size() == 0) throw PreconditionError("cannot normalize an empty PET volume");
  PetNormParams p;
  p.min = pet.voxels.minCoeff();
  p.max = pet.voxels.maxCoeff();
  Volume out(pet.meta);
  out.meta.modality = Modality::DERIVED;
  out.meta.intensity_units = "unitless";
  if (p.max == p.min) {
    p.degenerate = true;
    return {out, p};
  }
  const double range = p.max - p.min;
  out.voxels = ((pet.voxels.cast<double>().array() - p.min) / range).max(0.0).min(1.0).cast<float>().matrix();
  return {out, p};
}

nlohmann::json to_json(const CtNormParams& p) {
  return {{"p_low", p.p_low}, {"p_high", p.p_high}, {"clip_low", p.clip_low},
          {"clip_high", p.clip_high}, {"mean", p.mean}, {"std", p.std}};
}

nlohmann::json to_json(const PetNormParams& p) {
  return {{"min", p.min}, {"max", p.max}, {"degenerate", p.degenerate}};
}

}  // namespace sineseg
