#include "sineseg/infer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sineseg/error.hpp"

namespace sineseg {

void PlannerConfig::validate() const {
  if (!(step_init > 0.0)) throw ConfigError("step_init must be > 0");
  if (!(step_increment > 0.0)) throw ConfigError("step_increment must be > 0");
  if (!(coverage_threshold > 0.0 && coverage_threshold < 1.0))
    throw ConfigError("coverage_threshold must lie in (0, 1)");
  if (max_inplane_steps < 1) throw ConfigError("max_inplane_steps must be >= 1");
  if (!(step_cap >= step_init)) throw ConfigError("step_cap must be >= step_init");
}

namespace {

// Guards ceil() against representation error in step_frac * patch.
constexpr double kCeilSlack = 1e-9;

Index unrestricted_step_count(Index extent, Index patch, double step_frac) {
  if (extent == patch) return 1;
  const double raw = double(extent - patch) / (step_frac * double(patch));
  return std::max<Index>(2, static_cast<Index>(std::ceil(raw - kCeilSlack)) + 1);
}

void check_axis(Index extent, Index patch, double step_frac) {
  if (patch < 1 || extent < 1) throw PreconditionError("extent and patch must be positive");
  if (patch > extent) throw PreconditionError("patch is larger than the axis extent");
  if (!(step_frac > 0.0)) throw PreconditionError("step fraction must be > 0");
}

void dedupe(std::vector<Index>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

std::vector<Index> axis_steps(Index extent, Index patch, double step_frac) {
  check_axis(extent, patch, step_frac);
  const Index n = unrestricted_step_count(extent, patch, step_frac);
  if (n == 1) return {0};
  const double spacing = double(extent - patch) / double(n - 1);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(static_cast<Index>(std::llround(spacing * double(i))));
  dedupe(out);
  return out;
}

std::vector<Index> centered_axis_steps(Index extent, Index patch, double step_frac, int max_steps) {
  check_axis(extent, patch, step_frac);
  if (max_steps < 1) throw PreconditionError("max_steps must be >= 1");
  const Index spacing = std::max<Index>(1, static_cast<Index>(std::llround(step_frac * double(patch))));
  const Index k = std::min<Index>(max_steps, unrestricted_step_count(extent, patch, step_frac));
  const Index span = patch + (k - 1) * spacing;
  const Index first = std::max<Index>(0, static_cast<Index>(std::llround(double(extent - span) / 2.0)));
  std::vector<Index> out;
  for (Index i = 0; i < k; ++i) out.push_back(std::clamp<Index>(first + i * spacing, 0, extent - patch));
  dedupe(out);
  return out;
}

double axis_coverage(const std::vector<Index>& origins, Index patch, Index extent) {
  if (origins.empty()) throw PreconditionError("coverage of an empty origin list");
  if (extent < 1) throw PreconditionError("extent must be positive");
  std::vector<std::pair<Index, Index>> iv;
  for (Index o : origins) {
    const Index lo = std::max<Index>(0, o), hi = std::min<Index>(extent, o + patch);
    if (hi > lo) iv.emplace_back(lo, hi);
  }
  std::sort(iv.begin(), iv.end());
  Index covered = 0, cur_lo = -1, cur_hi = -1;
  for (const auto& [lo, hi] : iv) {
    if (lo > cur_hi) {
      covered += cur_hi - cur_lo;
      cur_lo = lo;
      cur_hi = hi;
    } else {
      cur_hi = std::max(cur_hi, hi);
    }
  }
  covered += cur_hi - cur_lo;
  return double(covered) / double(extent);
}

PatchPlan plan_sliding_window(const Dims3& volume_dims, const Dims3& patch_dims, const PlannerConfig& cfg) {
  cfg.validate();
  PatchPlan pp;
  pp.patch = patch_dims;
  pp.volume = volume_dims;
  for (int a = 0; a < 3; ++a) {
    if (volume_dims[a] < 1 || patch_dims[a] < 1) throw PreconditionError("volume and patch dims must be positive");
    const Index extent = std::max(volume_dims[a], patch_dims[a]);
    const Index patch = patch_dims[a];
    if (a == 0) {
      pp.axis_origins[0] = axis_steps(extent, patch, cfg.step_init);
      pp.step_fracs[0] = cfg.step_init;
    } else {
      int i = 0;
      double s = cfg.step_init;
      auto origins = centered_axis_steps(extent, patch, s, cfg.max_inplane_steps);
      double cov = axis_coverage(origins, patch, extent);
      while (cov <= cfg.coverage_threshold) {
        const double next = cfg.step_init + double(i + 1) * cfg.step_increment;
        if (next > cfg.step_cap + kCeilSlack) break;
        ++i;
        s = next;
        origins = centered_axis_steps(extent, patch, s, cfg.max_inplane_steps);
        cov = axis_coverage(origins, patch, extent);
      }
      pp.axis_origins[a] = std::move(origins);
      pp.step_fracs[a] = s;
    }
    pp.axis_coverage[a] = axis_coverage(pp.axis_origins[a], patch, extent);
  }
  pp.axial_steps = static_cast<int>(pp.axis_origins[0].size());
  for (Index z : pp.axis_origins[0])
    for (Index y : pp.axis_origins[1])
      for (Index x : pp.axis_origins[2]) pp.origins.push_back({z, y, x});
  return pp;
}

TtaPlan plan_tta(int axial_steps) {
  if (axial_steps < 1) throw PreconditionError("axial_steps must be >= 1");
  TtaPlan tp;
  if (axial_steps < 8) {
    for (FlipMask m = 0; m < 8; ++m) tp.flip_sets.push_back(m);
  } else if (axial_steps == 8) {
    tp.flip_sets = {0, 0b100, 0b010, 0b001};  // {}, {x}, {y}, {z}
  } else {
    tp.flip_sets = {0, 0b001};  // {}, {z}
  }
  return tp;
}

Eigen::VectorXf gaussian_importance(const Dims3& patch_dims, double sigma_scale) {
  if (!(sigma_scale > 0.0)) throw PreconditionError("sigma_scale must be > 0");
  std::array<Eigen::ArrayXd, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const Index n = patch_dims[a];
    if (n < 1) throw PreconditionError("patch dims must be positive");
    const double centre = double(n - 1) / 2.0;
    const double sigma = sigma_scale * double(n);
    axis[a].resize(n);
    for (Index i = 0; i < n; ++i) {
      const double d = double(i) - centre;
      axis[a][i] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
  }
  Eigen::VectorXf w(voxel_count(patch_dims));
  const float floor = std::numeric_limits<float>::min();
  Index i = 0;
  for (Index z = 0; z < patch_dims[0]; ++z)
    for (Index y = 0; y < patch_dims[1]; ++y)
      for (Index x = 0; x < patch_dims[2]; ++x, ++i)
        w[i] = std::max(static_cast<float>(axis[0][z] * axis[1][y] * axis[2][x]), floor);
  return w;
}

namespace {

template <typename Matrix>
Matrix flip_rows(const Matrix& m, const Dims3& d, FlipMask axes) {
  if (axes == 0) return m;
  Matrix out(m.rows(), m.cols());
  const bool fz = axes & 0b001, fy = axes & 0b010, fx = axes & 0b100;
  Index i = 0;
  for (Index z = 0; z < d[0]; ++z) {
    const Index sz = fz ? d[0] - 1 - z : z;
    for (Index y = 0; y < d[1]; ++y) {
      const Index sy = fy ? d[1] - 1 - y : y;
      const Index base = (sz * d[1] + sy) * d[2];
      for (Index x = 0; x < d[2]; ++x, ++i) out.col(i) = m.col(base + (fx ? d[2] - 1 - x : x));
    }
  }
  return out;
}

}  // namespace

MultiChannelVolume apply_flip(const MultiChannelVolume& v, FlipMask axes) {
  MultiChannelVolume out;
  out.meta = v.meta;
  out.channel_names = v.channel_names;
  out.channels = flip_rows(v.channels, v.dims(), axes);
  return out;
}

template <typename T>
FeatureMap<T> apply_flip(const FeatureMap<T>& v, FlipMask axes) {
  return FeatureMap<T>(v.dims, flip_rows(v.values, v.dims, axes));
}

template FeatureMap<float> apply_flip<float>(const FeatureMap<float>&, FlipMask);
template FeatureMap<double> apply_flip<double>(const FeatureMap<double>&, FlipMask);

RuntimeEstimate estimate_runtime(const PatchPlan& pp, const TtaPlan& tp, double per_patch_ms, double budget_ms) {
  if (!(per_patch_ms > 0.0)) throw PreconditionError("per_patch_ms must be > 0");
  RuntimeEstimate e;
  e.total_passes = static_cast<std::int64_t>(pp.origins.size() * tp.flip_sets.size());
  e.estimate_ms = double(e.total_passes) * per_patch_ms;
  e.budget_ms = budget_ms;
  e.within_budget = e.estimate_ms <= budget_ms;
  return e;
}

InferenceResult run_inference(const Network<float>& net, const MultiChannelVolume& input, const PatchPlan& pp,
                              const TtaPlan& tp, const InferenceOptions& opts) {
  const Dims3& d = input.dims();
  if (pp.volume != d) throw ShapeError("patch plan was built for different volume dims");
  if (input.num_channels() != net.config().in_channels) throw ShapeError("input channel count does not match the network");
  if (tp.flip_sets.empty()) throw PreconditionError("TTA plan has no flip sets");

  // Symmetric zero padding up to the patch on short axes.
  Dims3 padded, before;
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(d[a], pp.patch[a]);
    before[a] = (padded[a] - d[a]) / 2;
  }
  const Index classes = net.config().out_classes;
  const Index nvox = voxel_count(padded);
  RowMatrix<float> src = RowMatrix<float>::Zero(input.num_channels(), nvox);
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      src.middleCols(((z + before[0]) * padded[1] + y + before[1]) * padded[2] + before[2], d[2]) =
          input.channels.middleCols((z * d[1] + y) * d[2], d[2]);

  const Eigen::VectorXf w = gaussian_importance(pp.patch, opts.sigma_scale);
  RowMatrix<float> logit_sum = RowMatrix<float>::Zero(classes, nvox);
  Eigen::VectorXf weight_sum = Eigen::VectorXf::Zero(nvox);
  const Dims3& p = pp.patch;
  const Index pvox = voxel_count(p);

  InferenceResult res;
  FeatureMap<float> patch(input.num_channels(), p);
  for (const Dims3& o : pp.origins) {
    for (int a = 0; a < 3; ++a)
      if (o[a] < 0 || o[a] + p[a] > padded[a]) throw ShapeError("patch origin falls outside the volume");
    for (Index z = 0; z < p[0]; ++z)
      for (Index y = 0; y < p[1]; ++y)
        patch.values.middleCols((z * p[1] + y) * p[2], p[2]) =
            src.middleCols(((o[0] + z) * padded[1] + o[1] + y) * padded[2] + o[2], p[2]);
    RowMatrix<float> acc = RowMatrix<float>::Zero(classes, pvox);
    for (FlipMask f : tp.flip_sets) {
      const auto heads = forward(net, apply_flip(patch, f));
      acc += apply_flip(heads[0], f).values;
      ++res.passes;
    }
    acc /= float(tp.flip_sets.size());
    for (Index z = 0; z < p[0]; ++z)
      for (Index y = 0; y < p[1]; ++y) {
        const Index dst = ((o[0] + z) * padded[1] + o[1] + y) * padded[2] + o[2];
        const Index s = (z * p[1] + y) * p[2];
        logit_sum.middleCols(dst, p[2]).array() +=
            acc.middleCols(s, p[2]).array().rowwise() * w.segment(s, p[2]).transpose().array();
        weight_sum.segment(dst, p[2]) += w.segment(s, p[2]);
      }
  }

  VolumeMeta meta = input.meta;
  meta.modality = Modality::LABEL;
  meta.intensity_units = "unitless";
  res.mask = Volume(meta);
  meta.modality = Modality::DERIVED;
  meta.intensity_units = "probability";
  res.prob = Volume(meta);
  res.logits = Eigen::MatrixXf::Zero(classes, voxel_count(d));
  res.weight_sum = Eigen::VectorXf::Zero(voxel_count(d));
  Index i = 0;
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[2]; ++x, ++i) {
        const Index j = ((z + before[0]) * padded[1] + y + before[1]) * padded[2] + x + before[2];
        const float ws = weight_sum[j];
        res.weight_sum[i] = ws;
        if (!(ws > 0.0f)) continue;
        const Eigen::VectorXf l = logit_sum.col(j) / ws;
        res.logits.col(i) = l;
        Index best = 0;
        l.maxCoeff(&best);
        res.mask.voxels[i] = best >= 1 ? 1.0f : 0.0f;
        const Eigen::ArrayXf e = (l.array() - l.maxCoeff()).exp();
        res.prob.voxels[i] = classes > 1 ? e[1] / e.sum() : 0.0f;
      }
  return res;
}

nlohmann::json plan_to_json(const PatchPlan& pp, const TtaPlan& tp, const std::optional<RuntimeEstimate>& est) {
  nlohmann::json origins = nlohmann::json::array();
  for (const auto& o : pp.origins) origins.push_back({o[0], o[1], o[2]});
  nlohmann::json flips = nlohmann::json::array();
  for (FlipMask m : tp.flip_sets) {
    nlohmann::json axes = nlohmann::json::array();
    for (int a = 0; a < 3; ++a)
      if (m & (1 << a)) axes.push_back(a);
    flips.push_back(axes);
  }
  nlohmann::json j{{"patch", {pp.patch[0], pp.patch[1], pp.patch[2]}},
                   {"volume", {pp.volume[0], pp.volume[1], pp.volume[2]}},
                   {"origins", origins},
                   {"step_fracs", {pp.step_fracs[0], pp.step_fracs[1], pp.step_fracs[2]}},
                   {"axis_coverage", {pp.axis_coverage[0], pp.axis_coverage[1], pp.axis_coverage[2]}},
                   {"axial_steps", pp.axial_steps},
                   {"flip_sets", flips},
                   {"total_passes", pp.origins.size() * tp.flip_sets.size()}};
  if (est) {
    j["estimate_ms"] = est->estimate_ms;
    j["budget_ms"] = est->budget_ms;
    j["within_budget"] = est->within_budget;
  } else {
    j["estimate_ms"] = nullptr;
    j["within_budget"] = nullptr;
  }
  return j;
}

}  // namespace sineseg
