#pragma once

#include <array>

#include "sineseg/feature_map.hpp"

namespace sineseg {

using Triple = std::array<Index, 3>;

inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.01;

// Dense 3D convolution geometry. Weights are [cout, cin, kz, ky, kx],
// flattened row-major into a cout x (cin*kz*ky*kx) matrix.
struct ConvGeometry {
  Index cin = 1;
  Index cout = 1;
  Triple kernel{3, 3, 3};
  Triple stride{1, 1, 1};
  Triple pad{1, 1, 1};

  Index kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  Index weight_count() const { return cout * cin * kernel_volume(); }
  Dims3 out_dims(const Dims3& in) const;
};

template <typename T>
void conv3d_forward(const FeatureMap<T>& x, const ConvGeometry& g, const T* weight, const T* bias, FeatureMap<T>& y);

// Accumulates into dweight / dbias; writes dx when non-null.
template <typename T>
void conv3d_backward(const FeatureMap<T>& x, const ConvGeometry& g, const T* weight, const RowMatrix<T>& dy,
                     T* dweight, T* dbias, FeatureMap<T>* dx);

// Transposed convolution with kernel == stride (non-overlapping upsampling).
// Weights are [cin, cout, sz, sy, sx].
template <typename T>
void conv_transpose3d_forward(const FeatureMap<T>& x, Index cout, const Triple& stride, const T* weight,
                              const T* bias, FeatureMap<T>& y);

template <typename T>
void conv_transpose3d_backward(const FeatureMap<T>& x, Index cout, const Triple& stride, const T* weight,
                               const RowMatrix<T>& dy, T* dweight, T* dbias, FeatureMap<T>* dx);

template <typename T>
struct InstanceNormCache {
  RowMatrix<T> xhat;
  Vector<T> inv_std;
};

// Per-channel normalization over all voxels, then y = scale * xhat + shift.
template <typename T>
void instance_norm_forward(const RowMatrix<T>& x, const T* scale, const T* shift, RowMatrix<T>& y,
                           InstanceNormCache<T>* cache);

template <typename T>
void instance_norm_backward(const InstanceNormCache<T>& cache, const T* scale, const RowMatrix<T>& dy,
                            RowMatrix<T>& dx, T* dscale, T* dshift);

template <typename T>
void leaky_relu_inplace(RowMatrix<T>& x) {
  x = x.array().max(x.array() * T(kLeakySlope)).matrix();
}

// dx = dy * f'(pre), where pre is the activation input.
template <typename T>
RowMatrix<T> leaky_relu_backward(const RowMatrix<T>& pre, const RowMatrix<T>& dy) {
  return (pre.array() > T(0)).select(dy.array(), dy.array() * T(kLeakySlope)).matrix();
}

template <typename T>
inline T sigmoid(T v) {
  using std::exp;
  return T(1) / (T(1) + exp(-v));
}

// Per-channel linear recurrence over the z-major voxel sequence:
//   h_t = lambda h_{t-1} + beta x_t,   y_t = gamma h_t + x_t,
// with lambda = sigmoid(theta). Writes the hidden states into `hidden`
// when non-null.
template <typename T>
void linear_scan_forward(const RowMatrix<T>& x, const T* theta, const T* beta, const T* gamma, RowMatrix<T>& y,
                         RowMatrix<T>* hidden);

template <typename T>
void linear_scan_backward(const RowMatrix<T>& x, const RowMatrix<T>& hidden, const T* theta, const T* beta,
                          const T* gamma, const RowMatrix<T>& dy, RowMatrix<T>& dx, T* dtheta, T* dbeta,
                          T* dgamma);

}  // namespace sineseg
