#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "sineseg/network.hpp"

namespace sineseg {

// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradCheckEntry {
  std::string component;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int probes = 0;
  // Probes discarded because the perturbation flipped the sign of a
  // leaky-ReLU input, where central differences are not valid.
  int redrawn = 0;

  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool all_passed() const;
  void print(std::ostream& os) const;
};

struct GradCheckOptions {
  NetworkConfig network = NetworkConfig::toy();
  std::vector<double> sine_constants{20.0, 30.0};
  Dims3 input_dims{16, 16, 16};
  int parameter_probes = 20;
  int input_probes = 10;
  std::uint64_t seed = 7;
  // Negative control: scales the analytic network gradients so the check must fail.
  bool corrupt_network_gradient = false;
};

// 64-bit central-difference checks of the sine map, the losses and the
// network backward pass (parameters and the PET input through the sine channels).
GradCheckReport run_grad_check(const GradCheckOptions& opts);

}  // namespace sineseg
