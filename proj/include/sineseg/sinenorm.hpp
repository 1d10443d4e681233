#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sineseg/volume.hpp"

namespace sineseg {

// Frequencies for the periodic PET channels, one output channel per constant.
struct SineNormConfig {
  std::vector<double> constants_a{20.0, 30.0};

  Index hidden_channels() const { return static_cast<Index>(constants_a.size()); }
  void validate() const;  // PreconditionError unless non-empty and all > 0
};

// Largest tolerated excursion outside [0, 1]; smaller excess is clamped.
inline constexpr double kSineInputTolerance = 1e-6;

// y = sin(a x) and dy/dx = a cos(a x), element-wise, on any Eigen array.
template <typename Derived>
auto sine_map(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar a) {
  return (x * a).sin();
}

template <typename Derived>
auto sine_map_derivative(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar a) {
  return (x * a).cos() * a;
}

std::string sine_channel_name(double a);

MultiChannelVolume sine_transform(const Volume& pet_norm, const SineNormConfig& cfg);
MultiChannelVolume sine_gradient(const Volume& pet_norm, const SineNormConfig& cfg);

// Channels ordered [ct, pet, sin<a1>, sin<a2>, ...].
MultiChannelVolume assemble_input(const Volume& ct_norm, const Volume& pet_norm, const MultiChannelVolume& sine);

// Intensities k*pi/a in (0, 1) where sin(a x) changes sign; one ring each on
// a monotone radial uptake profile.
std::vector<double> ring_zero_crossings(double a);

// Chain rule through the sine channels: given the gradient of a loss with
// respect to every assembled input channel, returns dL/d(pet_norm).
Eigen::VectorXd pet_input_gradient(const Eigen::Ref<const Eigen::MatrixXd>& channel_grads,
                                   const std::vector<std::string>& channel_names,
                                   const Eigen::Ref<const Eigen::VectorXd>& pet_norm,
                                   const SineNormConfig& cfg);

}  // namespace sineseg
