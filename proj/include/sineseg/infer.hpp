#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "sineseg/network.hpp"
#include "sineseg/volume.hpp"

namespace sineseg {

// Sliding-window schedule knobs. Axis 0 (z, axial) always tiles at the
// initial step; axes 1 and 2 (coronal / sagittal) escalate.
struct PlannerConfig {
  double step_init = 0.5;
  double step_increment = 0.1;
  double coverage_threshold = 0.8;
  int max_inplane_steps = 4;
  double step_cap = 2.0;

  void validate() const;
};

struct PatchPlan {
  Dims3 patch{1, 1, 1};
  Dims3 volume{1, 1, 1};
  std::vector<Dims3> origins;
  std::array<std::vector<Index>, 3> axis_origins;
  std::array<double, 3> step_fracs{0.5, 0.5, 0.5};
  std::array<double, 3> axis_coverage{1.0, 1.0, 1.0};
  int axial_steps = 1;
};

// Bit a of a mask flips axis a (0 = z, 1 = y, 2 = x).
using FlipMask = std::uint8_t;

struct TtaPlan {
  std::vector<FlipMask> flip_sets;
};

std::vector<Index> axis_steps(Index extent, Index patch, double step_frac);
std::vector<Index> centered_axis_steps(Index extent, Index patch, double step_frac, int max_steps = 4);
double axis_coverage(const std::vector<Index>& origins, Index patch, Index extent);

// Axes where the volume is smaller than the patch are planned as a single
// placement on the zero-padded extent.
PatchPlan plan_sliding_window(const Dims3& volume_dims, const Dims3& patch_dims, const PlannerConfig& cfg = {});

TtaPlan plan_tta(int axial_steps);

// Separable Gaussian with peak 1 at the continuous patch centre (n-1)/2,
// sigma = sigma_scale * extent per axis, floored to stay strictly positive.
Eigen::VectorXf gaussian_importance(const Dims3& patch_dims, double sigma_scale = 1.0 / 8.0);

MultiChannelVolume apply_flip(const MultiChannelVolume& v, FlipMask axes);
template <typename T>
FeatureMap<T> apply_flip(const FeatureMap<T>& v, FlipMask axes);

struct RuntimeEstimate {
  std::int64_t total_passes = 0;
  double estimate_ms = 0.0;
  double budget_ms = 300000.0;
  bool within_budget = true;
};

RuntimeEstimate estimate_runtime(const PatchPlan& pp, const TtaPlan& tp, double per_patch_ms,
                                 double budget_ms = 300000.0);

struct InferenceResult {
  Volume mask;  // LABEL
  Volume prob;  // DERIVED, softmax foreground probability
  Eigen::MatrixXf logits;  // classes x voxels, aggregated (zero where uncovered)
  Eigen::VectorXf weight_sum;
  std::int64_t passes = 0;
};

struct InferenceOptions {
  double sigma_scale = 1.0 / 8.0;
};

InferenceResult run_inference(const Network<float>& net, const MultiChannelVolume& input, const PatchPlan& pp,
                              const TtaPlan& tp, const InferenceOptions& opts = {});

nlohmann::json plan_to_json(const PatchPlan& pp, const TtaPlan& tp, const std::optional<RuntimeEstimate>& est);

}  // namespace sineseg
