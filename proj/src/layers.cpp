#include "sineseg/layers.hpp"

#include <algorithm>
#include <cmath>

#include "sineseg/error.hpp"

namespace sineseg {

Dims3 ConvGeometry::out_dims(const Dims3& in) const {
  Dims3 out;
  for (int a = 0; a < 3; ++a) {
    const Index span = in[a] + 2 * pad[a] - kernel[a];
    if (span < 0) throw ShapeError("convolution kernel larger than padded input");
    out[a] = span / stride[a] + 1;
  }
  return out;
}

namespace {

// Upper bound on im2col scratch elements per chunk.
constexpr Index kChunkElements = Index(1) << 22;

Index slices_per_chunk(Index rows, Index plane) {
  return std::max<Index>(1, kChunkElements / std::max<Index>(1, rows * plane));
}

// Builds the (cin*kvol) x (nz*plane) patch matrix for output slices [z0, z0+nz).
template <typename T>
void im2col(const FeatureMap<T>& x, const ConvGeometry& g, const Dims3& od, Index z0, Index nz, RowMatrix<T>& cols) {
  const Index plane = od[1] * od[2];
  const Index in_h = x.dims[1], in_w = x.dims[2], in_d = x.dims[0];
  cols.resize(g.cin * g.kernel_volume(), nz * plane);
  Index row = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    const T* src = x.values.row(ci).data();
    for (Index kz = 0; kz < g.kernel[0]; ++kz)
      for (Index ky = 0; ky < g.kernel[1]; ++ky)
        for (Index kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          T* dst = cols.row(row).data();
          for (Index oz = 0; oz < nz; ++oz) {
            const Index iz = (z0 + oz) * g.stride[0] - g.pad[0] + kz;
            T* dplane = dst + oz * plane;
            if (iz < 0 || iz >= in_d) {
              std::fill(dplane, dplane + plane, T(0));
              continue;
            }
            for (Index oy = 0; oy < od[1]; ++oy) {
              const Index iy = oy * g.stride[1] - g.pad[1] + ky;
              T* drow = dplane + oy * od[2];
              if (iy < 0 || iy >= in_h) {
                std::fill(drow, drow + od[2], T(0));
                continue;
              }
              const T* srow = src + (iz * in_h + iy) * in_w;
              for (Index ox = 0; ox < od[2]; ++ox) {
                const Index ix = ox * g.stride[2] - g.pad[2] + kx;
                drow[ox] = (ix >= 0 && ix < in_w) ? srow[ix] : T(0);
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const RowMatrix<T>& cols, const ConvGeometry& g, const Dims3& od, Index z0, Index nz,
                FeatureMap<T>& dx) {
  const Index plane = od[1] * od[2];
  const Index in_h = dx.dims[1], in_w = dx.dims[2], in_d = dx.dims[0];
  Index row = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    T* dst = dx.values.row(ci).data();
    for (Index kz = 0; kz < g.kernel[0]; ++kz)
      for (Index ky = 0; ky < g.kernel[1]; ++ky)
        for (Index kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          const T* src = cols.row(row).data();
          for (Index oz = 0; oz < nz; ++oz) {
            const Index iz = (z0 + oz) * g.stride[0] - g.pad[0] + kz;
            if (iz < 0 || iz >= in_d) continue;
            for (Index oy = 0; oy < od[1]; ++oy) {
              const Index iy = oy * g.stride[1] - g.pad[1] + ky;
              if (iy < 0 || iy >= in_h) continue;
              const T* srow = src + oz * plane + oy * od[2];
              T* drow = dst + (iz * in_h + iy) * in_w;
              for (Index ox = 0; ox < od[2]; ++ox) {
                const Index ix = ox * g.stride[2] - g.pad[2] + kx;
                if (ix >= 0 && ix < in_w) drow[ix] += srow[ox];
              }
            }
          }
        }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == Triple{1, 1, 1} && g.stride == Triple{1, 1, 1} && g.pad == Triple{0, 0, 0};
}

}  // namespace

template <typename T>
void conv3d_forward(const FeatureMap<T>& x, const ConvGeometry& g, const T* weight, const T* bias, FeatureMap<T>& y) {
  if (x.channels() != g.cin) throw ShapeError("convolution input channel mismatch");
  const Dims3 od = g.out_dims(x.dims);
  const Eigen::Map<const RowMatrix<T>> w(weight, g.cout, g.cin * g.kernel_volume());
  y.dims = od;
  y.values.resize(g.cout, voxel_count(od));
  if (is_pointwise(g)) {
    y.values.noalias() = w * x.values;
  } else {
    const Index plane = od[1] * od[2];
    const Index step = slices_per_chunk(w.cols(), plane);
    RowMatrix<T> cols;
    for (Index z0 = 0; z0 < od[0]; z0 += step) {
      const Index nz = std::min(step, od[0] - z0);
      im2col(x, g, od, z0, nz, cols);
      y.values.middleCols(z0 * plane, nz * plane).noalias() = w * cols;
    }
  }
  if (bias != nullptr) y.values.colwise() += Eigen::Map<const Vector<T>>(bias, g.cout);
}

template <typename T>
void conv3d_backward(const FeatureMap<T>& x, const ConvGeometry& g, const T* weight, const RowMatrix<T>& dy,
                     T* dweight, T* dbias, FeatureMap<T>* dx) {
  const Dims3 od = g.out_dims(x.dims);
  if (dy.rows() != g.cout || dy.cols() != voxel_count(od)) throw ShapeError("convolution gradient shape mismatch");
  const Index k = g.cin * g.kernel_volume();
  const Eigen::Map<const RowMatrix<T>> w(weight, g.cout, k);
  Eigen::Map<RowMatrix<T>> dw(dweight, g.cout, k);
  if (dbias != nullptr) Eigen::Map<Vector<T>>(dbias, g.cout) += dy.rowwise().sum();
  if (dx != nullptr) *dx = FeatureMap<T>(g.cin, x.dims);

  if (is_pointwise(g)) {
    dw.noalias() += dy * x.values.transpose();
    if (dx != nullptr) dx->values.noalias() = w.transpose() * dy;
    return;
  }
  const Index plane = od[1] * od[2];
  const Index step = slices_per_chunk(k, plane);
  RowMatrix<T> cols, dcols;
  for (Index z0 = 0; z0 < od[0]; z0 += step) {
    const Index nz = std::min(step, od[0] - z0);
    const auto dy_chunk = dy.middleCols(z0 * plane, nz * plane);
    im2col(x, g, od, z0, nz, cols);
    dw.noalias() += dy_chunk * cols.transpose();
    if (dx != nullptr) {
      dcols.noalias() = w.transpose() * dy_chunk;
      col2im_add(dcols, g, od, z0, nz, *dx);
    }
  }
}

template <typename T>
void conv_transpose3d_forward(const FeatureMap<T>& x, Index cout, const Triple& stride, const T* weight,
                              const T* bias, FeatureMap<T>& y) {
  const Index cin = x.channels();
  const Index kvol = stride[0] * stride[1] * stride[2];
  const Eigen::Map<const RowMatrix<T>> w(weight, cin, cout * kvol);
  const RowMatrix<T> full = w.transpose() * x.values;  // (cout*kvol) x n_in
  const Dims3& id = x.dims;
  y.dims = {id[0] * stride[0], id[1] * stride[1], id[2] * stride[2]};
  y.values.resize(cout, voxel_count(y.dims));
  const Index oh = y.dims[1], ow = y.dims[2];
  for (Index co = 0; co < cout; ++co) {
    T* dst = y.values.row(co).data();
    const T b = bias != nullptr ? bias[co] : T(0);
    Index r = co * kvol;
    for (Index kz = 0; kz < stride[0]; ++kz)
      for (Index ky = 0; ky < stride[1]; ++ky)
        for (Index kx = 0; kx < stride[2]; ++kx, ++r) {
          const T* src = full.row(r).data();
          Index i = 0;
          for (Index iz = 0; iz < id[0]; ++iz)
            for (Index iy = 0; iy < id[1]; ++iy) {
              T* drow = dst + ((iz * stride[0] + kz) * oh + iy * stride[1] + ky) * ow + kx;
              for (Index ix = 0; ix < id[2]; ++ix, ++i) drow[ix * stride[2]] = src[i] + b;
            }
        }
  }
}

template <typename T>
void conv_transpose3d_backward(const FeatureMap<T>& x, Index cout, const Triple& stride, const T* weight,
                               const RowMatrix<T>& dy, T* dweight, T* dbias, FeatureMap<T>* dx) {
  const Index cin = x.channels();
  const Index kvol = stride[0] * stride[1] * stride[2];
  const Dims3& id = x.dims;
  const Dims3 od{id[0] * stride[0], id[1] * stride[1], id[2] * stride[2]};
  if (dy.rows() != cout || dy.cols() != voxel_count(od)) throw ShapeError("transposed convolution gradient mismatch");
  RowMatrix<T> gathered(cout * kvol, x.voxels());
  const Index oh = od[1], ow = od[2];
  for (Index co = 0; co < cout; ++co) {
    const T* src = dy.row(co).data();
    Index r = co * kvol;
    for (Index kz = 0; kz < stride[0]; ++kz)
      for (Index ky = 0; ky < stride[1]; ++ky)
        for (Index kx = 0; kx < stride[2]; ++kx, ++r) {
          T* dst = gathered.row(r).data();
          Index i = 0;
          for (Index iz = 0; iz < id[0]; ++iz)
            for (Index iy = 0; iy < id[1]; ++iy) {
              const T* srow = src + ((iz * stride[0] + kz) * oh + iy * stride[1] + ky) * ow + kx;
              for (Index ix = 0; ix < id[2]; ++ix, ++i) dst[i] = srow[ix * stride[2]];
            }
        }
  }
  const Eigen::Map<const RowMatrix<T>> w(weight, cin, cout * kvol);
  Eigen::Map<RowMatrix<T>>(dweight, cin, cout * kvol).noalias() += x.values * gathered.transpose();
  if (dbias != nullptr) Eigen::Map<Vector<T>>(dbias, cout) += dy.rowwise().sum();
  if (dx != nullptr) {
    dx->dims = id;
    dx->values.noalias() = w * gathered;
  }
}

template <typename T>
void instance_norm_forward(const RowMatrix<T>& x, const T* scale, const T* shift, RowMatrix<T>& y,
                           InstanceNormCache<T>* cache) {
  const Index c = x.rows();
  const Index n = x.cols();
  Vector<T> inv_std(c);
  RowMatrix<T> xhat(c, n);
  for (Index i = 0; i < c; ++i) {
    const T mean = x.row(i).mean();
    xhat.row(i) = x.row(i).array() - mean;
    const T var = xhat.row(i).squaredNorm() / T(n);
    inv_std[i] = T(1) / std::sqrt(var + T(kInstanceNormEps));
    xhat.row(i) *= inv_std[i];
  }
  y.resize(c, n);
  for (Index i = 0; i < c; ++i) y.row(i) = (xhat.row(i).array() * scale[i] + shift[i]).matrix();
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
}

template <typename T>
void instance_norm_backward(const InstanceNormCache<T>& cache, const T* scale, const RowMatrix<T>& dy,
                            RowMatrix<T>& dx, T* dscale, T* dshift) {
  const Index c = dy.rows();
  const T n = T(dy.cols());
  dx.resize(c, dy.cols());
  for (Index i = 0; i < c; ++i) {
    const auto xh = cache.xhat.row(i).array();
    const auto g = dy.row(i).array();
    dscale[i] += (g * xh).sum();
    dshift[i] += g.sum();
    const T mean_g = g.sum() / n;
    const T mean_gx = (g * xh).sum() / n;
    dx.row(i) = ((g - mean_g - xh * mean_gx) * (scale[i] * cache.inv_std[i])).matrix();
  }
}

template <typename T>
void linear_scan_forward(const RowMatrix<T>& x, const T* theta, const T* beta, const T* gamma, RowMatrix<T>& y,
                         RowMatrix<T>* hidden) {
  const Index c = x.rows();
  const Index n = x.cols();
  y.resize(c, n);
  if (hidden != nullptr) hidden->resize(c, n);
  for (Index i = 0; i < c; ++i) {
    const T lambda = sigmoid(theta[i]);
    const T* xs = x.row(i).data();
    T* ys = y.row(i).data();
    T* hs = hidden != nullptr ? hidden->row(i).data() : nullptr;
    T h = T(0);
    for (Index t = 0; t < n; ++t) {
      h = lambda * h + beta[i] * xs[t];
      if (hs != nullptr) hs[t] = h;
      ys[t] = gamma[i] * h + xs[t];
    }
  }
}

template <typename T>
void linear_scan_backward(const RowMatrix<T>& x, const RowMatrix<T>& hidden, const T* theta, const T* beta,
                          const T* gamma, const RowMatrix<T>& dy, RowMatrix<T>& dx, T* dtheta, T* dbeta,
                          T* dgamma) {
  const Index c = x.rows();
  const Index n = x.cols();
  dx.resize(c, n);
  for (Index i = 0; i < c; ++i) {
    const T lambda = sigmoid(theta[i]);
    const T* xs = x.row(i).data();
    const T* hs = hidden.row(i).data();
    const T* gs = dy.row(i).data();
    T* dxs = dx.row(i).data();
    T carry = T(0);  // dL/dh_t accumulated from the future
    T dl = T(0), db = T(0), dg = T(0);
    for (Index t = n - 1; t >= 0; --t) {
      dg += gs[t] * hs[t];
      const T dh = gamma[i] * gs[t] + carry;
      dxs[t] = gs[t] + beta[i] * dh;
      db += dh * xs[t];
      if (t > 0) dl += dh * hs[t - 1];
      carry = lambda * dh;
    }
    dtheta[i] += dl * lambda * (T(1) - lambda);
    dbeta[i] += db;
    dgamma[i] += dg;
  }
}

#define SINESEG_INSTANTIATE_LAYERS(T)                                                                              \
  template void conv3d_forward<T>(const FeatureMap<T>&, const ConvGeometry&, const T*, const T*, FeatureMap<T>&); \
  template void conv3d_backward<T>(const FeatureMap<T>&, const ConvGeometry&, const T*, const RowMatrix<T>&, T*,  \
                                   T*, FeatureMap<T>*);                                                          \
  template void conv_transpose3d_forward<T>(const FeatureMap<T>&, Index, const Triple&, const T*, const T*,      \
                                            FeatureMap<T>&);                                                     \
  template void conv_transpose3d_backward<T>(const FeatureMap<T>&, Index, const Triple&, const T*,               \
                                             const RowMatrix<T>&, T*, T*, FeatureMap<T>*);                       \
  template void instance_norm_forward<T>(const RowMatrix<T>&, const T*, const T*, RowMatrix<T>&,                 \
                                         InstanceNormCache<T>*);                                                 \
  template void instance_norm_backward<T>(const InstanceNormCache<T>&, const T*, const RowMatrix<T>&,            \
                                          RowMatrix<T>&, T*, T*);                                                \
  template void linear_scan_forward<T>(const RowMatrix<T>&, const T*, const T*, const T*, RowMatrix<T>&,         \
                                       RowMatrix<T>*);                                                           \
  template void linear_scan_backward<T>(const RowMatrix<T>&, const RowMatrix<T>&, const T*, const T*, const T*,  \
                                        const RowMatrix<T>&, RowMatrix<T>&, T*, T*, T*);

SINESEG_INSTANTIATE_LAYERS(float)
SINESEG_INSTANTIATE_LAYERS(double)

#undef SINESEG_INSTANTIATE_LAYERS

}  // namespace sineseg
