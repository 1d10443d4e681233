#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "sineseg/error.hpp"
#include "sineseg/volume.hpp"

namespace sineseg {

void PhantomSpec::validate() const {
  for (int a = 0; a < 3; ++a)
    if (dims[a] < 1) throw PreconditionError("phantom dims must be >= 1");
  if (n_lesions < 0) throw PreconditionError("n_lesions must be >= 0");
  const auto [rmin, rmax] = lesion_radius_range;
  if (rmin < 1 || rmax < rmin) throw PreconditionError("lesion_radius_range must satisfy 1 <= min <= max");
  const auto [umin, umax] = lesion_uptake_range;
  if (umax < umin) throw PreconditionError("lesion_uptake_range must satisfy min <= max");
  if (!(umin > background_uptake)) throw PreconditionError("lesion uptake must exceed background uptake");
  if (background_uptake < 0.0f || pet_noise_std < 0.0f) throw PreconditionError("uptake and noise must be >= 0");
  if (n_lesions > 0) {
    for (int a = 0; a < 3; ++a)
      if (2 * rmin + 1 > dims[a])
        throw PreconditionError("lesion radius " + std::to_string(rmin) + " does not fit inside dims");
  }
}

namespace {

struct Sphere {
  Index z, y, x;
  int r;
};

}  // namespace

Phantom synth_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  std::vector<Sphere> spheres;
  spheres.reserve(static_cast<std::size_t>(spec.n_lesions));
  for (int l = 0; l < spec.n_lesions; ++l) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      std::uniform_int_distribution<int> rdist(spec.lesion_radius_range.first, spec.lesion_radius_range.second);
      const int r = rdist(rng);
      if (2 * r + 1 > spec.dims[0] || 2 * r + 1 > spec.dims[1] || 2 * r + 1 > spec.dims[2]) continue;
      Sphere s{0, 0, 0, r};
      Index* c[3] = {&s.z, &s.y, &s.x};
      for (int a = 0; a < 3; ++a) {
        std::uniform_int_distribution<Index> cdist(r, spec.dims[a] - 1 - r);
        *c[a] = cdist(rng);
      }
      bool clear = true;
      for (const auto& o : spheres) {
        const double dz = double(s.z - o.z), dy = double(s.y - o.y), dx = double(s.x - o.x);
        if (std::sqrt(dz * dz + dy * dy + dx * dx) <= double(s.r + o.r + 1)) clear = false;
      }
      if (clear) {
        spheres.push_back(s);
        placed = true;
      }
    }
    if (!placed)
      throw PreconditionError("could not place lesion " + std::to_string(l) + " after " +
                              std::to_string(spec.max_retries) + " attempts");
  }

  Phantom out;
  VolumeMeta meta;
  meta.dims = spec.dims;
  meta.modality = Modality::CT;
  meta.intensity_units = "HU";
  out.ct = Volume(meta);
  meta.modality = Modality::PET;
  meta.intensity_units = "SUV";
  out.pet = Volume(meta);
  meta.modality = Modality::LABEL;
  meta.intensity_units = "unitless";
  out.labels = Volume(meta);

  for (const auto& s : spheres) {
    const Index r = s.r;
    for (Index z = s.z - r; z <= s.z + r; ++z)
      for (Index y = s.y - r; y <= s.y + r; ++y)
        for (Index x = s.x - r; x <= s.x + r; ++x) {
          const Index dz = z - s.z, dy = y - s.y, dx = x - s.x;
          if (dz * dz + dy * dy + dx * dx <= r * r) out.labels.at(z, y, x) = 1.0f;
        }
  }

  std::normal_distribution<float> noise(0.0f, spec.pet_noise_std);
  std::uniform_real_distribution<float> lesion_uptake(spec.lesion_uptake_range.first, spec.lesion_uptake_range.second);
  const double two_pi = 2.0 * std::numbers::pi;
  const auto& d = spec.dims;
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[2]; ++x) {
        const Index i = out.ct.index(z, y, x);
        const bool lesion = out.labels.voxels[i] > 0.5f;
        const double smooth = 40.0 + 25.0 * std::sin(two_pi * double(z) / double(d[0])) *
                                         std::cos(two_pi * double(y) / double(d[1])) +
                              15.0 * std::cos(two_pi * double(x) / double(d[2]));
        out.ct.voxels[i] = static_cast<float>(smooth + (lesion ? 60.0 : 0.0));
        float p = lesion ? lesion_uptake(rng) : spec.background_uptake + (spec.pet_noise_std > 0 ? noise(rng) : 0.0f);
        out.pet.voxels[i] = std::max(p, 0.0f);
      }
  return out;
}

}  // namespace sineseg
