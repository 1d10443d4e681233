#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace sineseg {

using Index = Eigen::Index;

// Extents in (z, y, x) order; z is the axial (superior-inferior) axis.
using Dims3 = std::array<Index, 3>;

inline Index voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

enum class Modality { CT, PET, LABEL, DERIVED };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

struct VolumeMeta {
  Dims3 dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel, (z, y, x)
  Modality modality = Modality::DERIVED;
  std::string intensity_units = "unitless";

  // Throws ShapeError / PreconditionError when dims or spacing are invalid.
  void validate() const;
};

// Dense 3D float32 grid, row-major in (z, y, x): index = (z*ny + y)*nx + x.
struct Volume {
  VolumeMeta meta;
  Eigen::VectorXf voxels;

  Volume() = default;
  explicit Volume(VolumeMeta m);  // zero-filled
  Volume(VolumeMeta m, Eigen::VectorXf values);

  const Dims3& dims() const { return meta.dims; }
  Index size() const { return voxels.size(); }
  Index index(Index z, Index y, Index x) const {
    return (z * meta.dims[1] + y) * meta.dims[2] + x;
  }
  float& at(Index z, Index y, Index x) { return voxels[index(z, y, x)]; }
  float at(Index z, Index y, Index x) const { return voxels[index(z, y, x)]; }

  // Checks meta, voxel count, finiteness and the LABEL {0,1} rule.
  void validate() const;
};

// Several scalar grids sharing one geometry; rows are channels.
struct MultiChannelVolume {
  VolumeMeta meta;
  std::vector<std::string> channel_names;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> channels;

  Index num_channels() const { return channels.rows(); }
  const Dims3& dims() const { return meta.dims; }

  Volume channel(Index c) const;
  Index find_channel(const std::string& name) const;  // -1 when missing
  MultiChannelVolume select(const std::vector<std::string>& names) const;
  void validate() const;
};

// Raw little-endian float32 data plus JSON sidecar.
Volume read_raw_volume(const std::filesystem::path& data_path,
                       const std::filesystem::path& meta_path);
void write_raw_volume(const Volume& v, const std::filesystem::path& data_path,
                      const std::filesystem::path& meta_path);

// Convenience: "<stem>.f32" + "<stem>.json".
Volume read_volume(const std::filesystem::path& stem);
void write_volume(const Volume& v, const std::filesystem::path& stem);

// Multi-channel files: channels concatenated channel-major in one .f32 blob;
// the sidecar carries an extra "channels" array of names.
MultiChannelVolume read_multichannel(const std::filesystem::path& stem);
void write_multichannel(const MultiChannelVolume& v, const std::filesystem::path& stem);

// Single 3D NIfTI-1 image, datatypes uint8 / int16 / float32.
Volume read_nifti_subset(const std::filesystem::path& path);

struct PhantomSpec {
  std::uint64_t seed = 42;
  Dims3 dims{64, 64, 64};
  int n_lesions = 2;
  std::pair<int, int> lesion_radius_range{5, 8};
  float background_uptake = 1.0f;
  std::pair<float, float> lesion_uptake_range{4.0f, 8.0f};
  float pet_noise_std = 0.25f;
  int max_retries = 1000;

  void validate() const;
};

struct Phantom {
  Volume ct;
  Volume pet;
  Volume labels;
};

Phantom synth_phantom(const PhantomSpec& spec);

}  // namespace sineseg
