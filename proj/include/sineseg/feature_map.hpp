#pragma once

#include <Eigen/Core>

#include "sineseg/volume.hpp"

namespace sineseg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Channels x voxels activation tensor; each row is one channel laid out in
// (z, y, x) row-major order.
template <typename T>
struct FeatureMap {
  Dims3 dims{1, 1, 1};
  RowMatrix<T> values;

  FeatureMap() = default;
  FeatureMap(Index channels, const Dims3& d) : dims(d), values(RowMatrix<T>::Zero(channels, voxel_count(d))) {}
  FeatureMap(const Dims3& d, RowMatrix<T> v) : dims(d), values(std::move(v)) {}

  Index channels() const { return values.rows(); }
  Index voxels() const { return values.cols(); }

  template <typename U>
  FeatureMap<U> cast() const {
    return FeatureMap<U>(dims, values.template cast<U>());
  }
};

template <typename T>
FeatureMap<T> to_feature_map(const MultiChannelVolume& v) {
  return FeatureMap<T>(v.dims(), v.channels.template cast<T>());
}

}  // namespace sineseg
