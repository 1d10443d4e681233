#include "sineseg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>

#include "sineseg/error.hpp"
#include "sineseg/sinenorm.hpp"
#include "sineseg/train.hpp"

namespace sineseg {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

bool GradCheckReport::all_passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
}

void GradCheckReport::print(std::ostream& os) const {
  for (const auto& e : entries) {
    os << std::left << std::setw(22) << e.component << " probes " << std::setw(5) << e.probes << " max_rel_err "
       << std::scientific << std::setprecision(3) << e.max_rel_error << " tol " << e.tolerance;
    if (e.redrawn > 0) os << " redrawn " << e.redrawn;
    os << "  " << (e.passed() ? "ok" : "FAIL") << '\n'
       << std::defaultfloat;
  }
}

namespace {

GradCheckEntry check_sine(const std::vector<double>& constants, std::mt19937_64& rng) {
  GradCheckEntry e{"sinenorm", 0.0, 1e-6, 0};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr double eps = 1e-5;
  for (int i = 0; i < 1000; ++i) {
    Eigen::ArrayXd x(1);
    x[0] = u(rng);
    for (double a : constants) {
      const double analytic = sine_map_derivative(x, a)[0];
      const double numeric = (std::sin(a * (x[0] + eps)) - std::sin(a * (x[0] - eps))) / (2 * eps);
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic, numeric));
      ++e.probes;
    }
  }
  return e;
}

LabelMap random_labels(const Dims3& d, std::mt19937_64& rng, double p_fg) {
  LabelMap m;
  m.dims = d;
  m.classes.resize(voxel_count(d));
  std::bernoulli_distribution b(p_fg);
  for (Index i = 0; i < m.voxels(); ++i) m.classes[i] = b(rng) ? 1 : 0;
  return m;
}

GradCheckEntry check_cross_entropy(std::mt19937_64& rng) {
  GradCheckEntry e{"cross_entropy", 0.0, 1e-4, 0};
  const Dims3 d{2, 3, 4};
  FeatureMap<double> z(2, d);
  std::normal_distribution<double> n(0.0, 1.5);
  for (Index i = 0; i < z.values.size(); ++i) z.values.data()[i] = n(rng);
  const LabelMap t = random_labels(d, rng, 0.4);
  const RowMatrix<double> g = cross_entropy_grad(z, t);
  constexpr double eps = 1e-6;
  for (Index i = 0; i < z.values.size(); ++i) {
    FeatureMap<double> zp = z, zm = z;
    zp.values.data()[i] += eps;
    zm.values.data()[i] -= eps;
    const double numeric = (cross_entropy_loss(zp, t) - cross_entropy_loss(zm, t)) / (2 * eps);
    e.max_rel_error = std::max(e.max_rel_error, relative_error(g.data()[i], numeric));
    ++e.probes;
  }
  return e;
}

GradCheckEntry check_dice(std::mt19937_64& rng) {
  GradCheckEntry e{"soft_dice", 0.0, 1e-4, 0};
  const Dims3 d{2, 3, 4};
  const Index n = voxel_count(d);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  RowMatrix<double> p(2, n);
  for (Index v = 0; v < n; ++v) {
    p(1, v) = u(rng);
    p(0, v) = 1.0 - p(1, v);
  }
  const LabelMap t = random_labels(d, rng, 0.4);
  const RowMatrix<double> g = soft_dice_grad(p, t);
  constexpr double eps = 1e-6;
  for (Index v = 0; v < n; ++v) {
    RowMatrix<double> pp = p, pm = p;
    pp(1, v) += eps;
    pm(1, v) -= eps;
    const double numeric = (soft_dice_loss(pp, t) - soft_dice_loss(pm, t)) / (2 * eps);
    e.max_rel_error = std::max(e.max_rel_error, relative_error(g(1, v), numeric));
    ++e.probes;
  }
  return e;
}

GradCheckEntry check_combined(std::mt19937_64& rng) {
  GradCheckEntry e{"ce_plus_dice_logits", 0.0, 1e-4, 0};
  const Dims3 d{2, 2, 4};
  FeatureMap<double> z(2, d);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Index i = 0; i < z.values.size(); ++i) z.values.data()[i] = n(rng);
  const std::vector<LabelMap> t{random_labels(d, rng, 0.5)};
  const std::vector<double> w{1.0};
  const auto r = combined_loss<double>({z}, t, w);
  constexpr double eps = 1e-6;
  for (Index i = 0; i < z.values.size(); ++i) {
    FeatureMap<double> zp = z, zm = z;
    zp.values.data()[i] += eps;
    zm.values.data()[i] -= eps;
    const double numeric =
        (combined_loss<double>({zp}, t, w).total - combined_loss<double>({zm}, t, w).total) / (2 * eps);
    e.max_rel_error = std::max(e.max_rel_error, relative_error(r.grads[0].values.data()[i], numeric));
    ++e.probes;
  }
  return e;
}

// Smooth PET-like field in [0, 1] with one bright blob.
Eigen::VectorXd synthetic_pet(const Dims3& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 0.05);
  Eigen::VectorXd pet(voxel_count(d));
  Index i = 0;
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[2]; ++x, ++i) {
        const double r2 = std::pow(z - d[0] / 2.0, 2) + std::pow(y - d[1] / 2.0, 2) + std::pow(x - d[2] / 2.0, 2);
        pet[i] = std::clamp(0.8 * std::exp(-r2 / (2.0 * 9.0)) + 0.1 + u(rng), 0.0, 1.0);
      }
  return pet;
}

FeatureMap<double> assemble(const Eigen::VectorXd& ct, const Eigen::VectorXd& pet, const std::vector<double>& a,
                            const Dims3& d) {
  FeatureMap<double> x(2 + static_cast<Index>(a.size()), d);
  x.values.row(0) = ct.transpose();
  x.values.row(1) = pet.transpose();
  for (std::size_t c = 0; c < a.size(); ++c)
    x.values.row(2 + static_cast<Index>(c)) = sine_map(pet.array(), a[c]).matrix().transpose();
  return x;
}

template <typename M>
bool same_signs(const M& a, const M& b) {
  return ((a.array() > 0) == (b.array() > 0)).all();
}

// True when every leaky-ReLU input in a has the same sign as in b.
bool same_activation_pattern(const ForwardTrace<double>& a, const ForwardTrace<double>& b) {
  for (std::size_t s = 0; s < a.blocks.size(); ++s)
    for (std::size_t k = 0; k < a.blocks[s].size(); ++k) {
      const auto& ca = a.blocks[s][k];
      const auto& cb = b.blocks[s][k];
      if (!same_signs(ca.pre1.values, cb.pre1.values) || !same_signs(ca.sum, cb.sum)) return false;
    }
  for (std::size_t s = 0; s < a.decoder.size(); ++s)
    if (a.decoder[s].pre.values.size() > 0 && !same_signs(a.decoder[s].pre.values, b.decoder[s].pre.values))
      return false;
  return true;
}

}  // namespace

GradCheckReport run_grad_check(const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  report.entries.push_back(check_sine(opts.sine_constants, rng));
  report.entries.push_back(check_cross_entropy(rng));
  report.entries.push_back(check_dice(rng));
  report.entries.push_back(check_combined(rng));

  NetworkConfig cfg = opts.network;
  cfg.in_channels = 2 + static_cast<Index>(opts.sine_constants.size());
  cfg.input_channels.clear();
  Network<double> net = build_network<double>(cfg);
  // Move norm, bias and context parameters off their initial values so every
  // parameter kind carries a non-trivial gradient.
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : net.parameters()) {
    if (p.shape.size() == 5) continue;
    for (Index i = 0; i < p.value.size(); ++i) p.value[i] += jitter(rng);
  }

  const Dims3& d = opts.input_dims;
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd ct(voxel_count(d));
  for (Index i = 0; i < ct.size(); ++i) ct[i] = n(rng);
  const Eigen::VectorXd pet = synthetic_pet(d, rng);
  const FeatureMap<double> input = assemble(ct, pet, opts.sine_constants, d);
  LabelMap labels;
  labels.dims = d;
  labels.classes = (pet.array() > 0.5).cast<int>();
  const auto targets = deep_supervision_targets(cfg, labels);
  const auto weights = ds_weights(cfg);

  ForwardTrace<double> trace;
  // Loss at a perturbed point; kinked is set when an activation changed sign.
  auto loss_of = [&](const Network<double>& m, const FeatureMap<double>& x, bool& kinked) {
    ForwardTrace<double> t;
    const double l = combined_loss(forward(m, x, &t), targets, weights).total;
    if (!same_activation_pattern(trace, t)) kinked = true;
    return l;
  };

  const auto heads = forward(net, input, &trace);
  const auto lr = combined_loss(heads, targets, weights);
  auto grads = backward(net, trace, lr.grads);
  if (opts.corrupt_network_gradient) {
    for (auto& g : grads.params) g *= 1.1;
    grads.input.values *= 1.1;
  }

  {
    GradCheckEntry e{"network_parameters", 0.0, 1e-3, 0};
    constexpr double eps = 1e-4;
    std::uniform_int_distribution<std::size_t> pick_param(0, net.parameters().size() - 1);
    while (e.probes < opts.parameter_probes) {
      const std::size_t pi = pick_param(rng);
      auto& p = net.parameters()[pi];
      std::uniform_int_distribution<Index> pick(0, p.value.size() - 1);
      const Index k = pick(rng);
      const double orig = p.value[k];
      bool kinked = false;
      p.value[k] = orig + eps;
      const double lp = loss_of(net, input, kinked);
      p.value[k] = orig - eps;
      const double lm = loss_of(net, input, kinked);
      p.value[k] = orig;
      if (kinked) {
        if (++e.redrawn > 50 * opts.parameter_probes) throw Error("too many probes landed on activation kinks");
        continue;
      }
      e.max_rel_error = std::max(e.max_rel_error, relative_error(grads.params[pi][k], (lp - lm) / (2 * eps)));
      ++e.probes;
    }
    report.entries.push_back(e);
  }

  {
    // dL/dPET through the pet channel and every sine channel.
    GradCheckEntry e{"pet_input_chain", 0.0, 1e-3, 0};
    SineNormConfig sc;
    sc.constants_a = opts.sine_constants;
    std::vector<std::string> names{"ct", "pet"};
    for (double a : opts.sine_constants) names.push_back(sine_channel_name(a));
    const Eigen::VectorXd analytic =
        pet_input_gradient(Eigen::MatrixXd(grads.input.values), names, pet, sc);
    constexpr double eps = 1e-5;
    std::uniform_int_distribution<Index> pick(0, pet.size() - 1);
    while (e.probes < opts.input_probes) {
      const Index v = pick(rng);
      Eigen::VectorXd pp = pet, pm = pet;
      pp[v] += eps;
      pm[v] -= eps;
      bool kinked = false;
      const double lp = loss_of(net, assemble(ct, pp, opts.sine_constants, d), kinked);
      const double lm = loss_of(net, assemble(ct, pm, opts.sine_constants, d), kinked);
      if (kinked) {
        if (++e.redrawn > 50 * opts.input_probes) throw Error("too many probes landed on activation kinks");
        continue;
      }
      const double numeric = (lp - lm) / (2 * eps);
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[v], numeric));
      ++e.probes;
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace sineseg
