#include "sineseg/sinenorm.hpp"

#include <cstdio>
#include <numbers>

#include "sineseg/error.hpp"

namespace sineseg {

void SineNormConfig::validate() const {
  if (constants_a.empty()) throw PreconditionError("sine config needs at least one constant");
  for (double a : constants_a)
    if (!(a > 0.0) || !std::isfinite(a)) throw PreconditionError("sine constants must be positive");
}

std::string sine_channel_name(double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "sin%g", a);
  return buf;
}

namespace {

Eigen::ArrayXd checked_unit_input(const Volume& pet_norm) {
  Eigen::ArrayXd x = pet_norm.voxels.cast<double>().array();
  if (!x.allFinite()) throw PreconditionError("sine transform input is not finite");
  if (x.size() > 0 && (x.minCoeff() < -kSineInputTolerance || x.maxCoeff() > 1.0 + kSineInputTolerance))
    throw PreconditionError("sine transform input lies outside [0, 1]; normalize PET first");
  return x.max(0.0).min(1.0);
}

MultiChannelVolume make_channels(const Volume& pet_norm, const SineNormConfig& cfg, bool derivative) {
  cfg.validate();
  const Eigen::ArrayXd x = checked_unit_input(pet_norm);
  MultiChannelVolume out;
  out.meta = pet_norm.meta;
  out.meta.modality = Modality::DERIVED;
  out.meta.intensity_units = "unitless";
  out.channels.resize(cfg.hidden_channels(), x.size());
  for (Index c = 0; c < cfg.hidden_channels(); ++c) {
    const double a = cfg.constants_a[static_cast<std::size_t>(c)];
    const Eigen::ArrayXd y = derivative ? Eigen::ArrayXd(sine_map_derivative(x, a)) : Eigen::ArrayXd(sine_map(x, a));
    out.channels.row(c) = y.cast<float>().matrix().transpose();
    out.channel_names.push_back(derivative ? "d" + sine_channel_name(a) : sine_channel_name(a));
  }
  return out;
}

}  // namespace

MultiChannelVolume sine_transform(const Volume& pet_norm, const SineNormConfig& cfg) {
  return make_channels(pet_norm, cfg, false);
}

MultiChannelVolume sine_gradient(const Volume& pet_norm, const SineNormConfig& cfg) {
  return make_channels(pet_norm, cfg, true);
}

MultiChannelVolume assemble_input(const Volume& ct_norm, const Volume& pet_norm, const MultiChannelVolume& sine) {
  if (ct_norm.dims() != pet_norm.dims() || (sine.num_channels() > 0 && sine.dims() != pet_norm.dims()))
    throw ShapeError("CT, PET and sine channels must share dims");
  MultiChannelVolume out;
  out.meta = pet_norm.meta;
  out.meta.modality = Modality::DERIVED;
  out.meta.intensity_units = "unitless";
  const Index n = pet_norm.size();
  out.channels.resize(2 + sine.num_channels(), n);
  out.channels.row(0) = ct_norm.voxels.transpose();
  out.channels.row(1) = pet_norm.voxels.transpose();
  if (sine.num_channels() > 0) out.channels.bottomRows(sine.num_channels()) = sine.channels;
  out.channel_names = {"ct", "pet"};
  out.channel_names.insert(out.channel_names.end(), sine.channel_names.begin(), sine.channel_names.end());
  out.validate();
  return out;
}

std::vector<double> ring_zero_crossings(double a) {
  if (!(a > 0.0)) throw PreconditionError("ring_zero_crossings needs a > 0");
  std::vector<double> out;
  for (int k = 1;; ++k) {
    const double level = k * std::numbers::pi / a;
    if (!(level < 1.0)) break;
    out.push_back(level);
  }
  return out;
}

Eigen::VectorXd pet_input_gradient(const Eigen::Ref<const Eigen::MatrixXd>& channel_grads,
                                   const std::vector<std::string>& channel_names,
                                   const Eigen::Ref<const Eigen::VectorXd>& pet_norm,
                                   const SineNormConfig& cfg) {
  if (channel_grads.rows() != static_cast<Index>(channel_names.size()) || channel_grads.cols() != pet_norm.size())
    throw ShapeError("channel gradient shape does not match channel names / PET size");
  Eigen::VectorXd g = Eigen::VectorXd::Zero(pet_norm.size());
  for (std::size_t c = 0; c < channel_names.size(); ++c) {
    if (channel_names[c] == "pet") g += channel_grads.row(static_cast<Index>(c)).transpose();
  }
  for (double a : cfg.constants_a) {
    const std::string name = sine_channel_name(a);
    for (std::size_t c = 0; c < channel_names.size(); ++c)
      if (channel_names[c] == name)
        g.array() += channel_grads.row(static_cast<Index>(c)).transpose().array() *
                     sine_map_derivative(pet_norm.array(), a);
  }
  return g;
}

}  // namespace sineseg
