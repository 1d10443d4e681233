#include "sineseg/train.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "sineseg/error.hpp"

namespace sineseg {

LabelMap label_map_from_volume(const Volume& labels) {
  LabelMap m;
  m.dims = labels.dims();
  m.classes.resize(labels.size());
  for (Index i = 0; i < labels.size(); ++i) {
    const float v = labels.voxels[i];
    if (v != 0.0f && v != 1.0f) throw PreconditionError("label volume must be binary");
    m.classes[i] = v > 0.5f ? 1 : 0;
  }
  return m;
}

LabelMap downsample_labels(const LabelMap& labels, const Triple& f) {
  if (f == Triple{1, 1, 1}) return labels;
  LabelMap out;
  for (int a = 0; a < 3; ++a) {
    if (labels.dims[a] % f[a] != 0) throw ShapeError("label dims not divisible by downsampling factor");
    out.dims[a] = labels.dims[a] / f[a];
  }
  out.classes.resize(voxel_count(out.dims));
  const Dims3& d = labels.dims;
  Index i = 0;
  for (Index z = 0; z < out.dims[0]; ++z)
    for (Index y = 0; y < out.dims[1]; ++y)
      for (Index x = 0; x < out.dims[2]; ++x, ++i) {
        const Index sz = z * f[0] + f[0] / 2, sy = y * f[1] + f[1] / 2, sx = x * f[2] + f[2] / 2;
        out.classes[i] = labels.classes[(sz * d[1] + sy) * d[2] + sx];
      }
  return out;
}

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.max_epochs = 200;
  c.iterations_per_epoch = 1;
  c.patch = {32, 32, 32};
  c.foreground_oversample = 0.5;
  c.eval_every = 10;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be >= 0");
  if (!(poly_exponent > 0.0)) throw ConfigError("poly_exponent must be > 0");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (accum_steps < 1) throw ConfigError("accum_steps must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (iterations_per_epoch < 1) throw ConfigError("iterations_per_epoch must be >= 1");
  for (Index p : patch)
    if (p < 1) throw ConfigError("patch dims must be positive");
  if (!(foreground_oversample >= 0.0 && foreground_oversample <= 1.0))
    throw ConfigError("foreground_oversample must lie in [0, 1]");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"poly_exponent", c.poly_exponent},
          {"max_epochs", c.max_epochs},
          {"batch_size", c.batch_size},
          {"accum_steps", c.accum_steps},
          {"momentum", c.momentum},
          {"seed", c.seed},
          {"iterations_per_epoch", c.iterations_per_epoch},
          {"patch", {c.patch[0], c.patch[1], c.patch[2]}},
          {"foreground_oversample", c.foreground_oversample},
          {"eval_every", c.eval_every}};
}

void update_from_json(TrainConfig& c, const nlohmann::json& j) {
  try {
    c.lr0 = j.value("lr0", c.lr0);
    c.poly_exponent = j.value("poly_exponent", c.poly_exponent);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.accum_steps = j.value("accum_steps", c.accum_steps);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    c.iterations_per_epoch = j.value("iterations_per_epoch", c.iterations_per_epoch);
    if (j.contains("patch")) {
      const auto p = j.at("patch").get<std::vector<Index>>();
      if (p.size() != 3) throw ConfigError("train patch must have 3 entries");
      c.patch = {p[0], p[1], p[2]};
    }
    c.foreground_oversample = j.value("foreground_oversample", c.foreground_oversample);
    c.eval_every = j.value("eval_every", c.eval_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
}

double poly_lr(int epoch, int max_epochs, double lr0, double exponent) {
  if (max_epochs < 1 || epoch < 0) throw PreconditionError("poly_lr needs 0 <= epoch and max_epochs >= 1");
  if (epoch > max_epochs) throw PreconditionError("poly_lr epoch exceeds max_epochs");
  return lr0 * std::pow(1.0 - double(epoch) / double(max_epochs), exponent);
}

template <typename T>
RowMatrix<T> softmax(const RowMatrix<T>& logits) {
  RowMatrix<T> p = logits.rowwise() - logits.colwise().maxCoeff();
  p = p.array().exp().matrix();
  const Eigen::Matrix<T, 1, Eigen::Dynamic> s = p.colwise().sum();
  for (Index r = 0; r < p.rows(); ++r) p.row(r).array() /= s.array();
  return p;
}

namespace {

void check_target(Index voxels, Index classes, const LabelMap& target) {
  if (target.voxels() != voxels) throw ShapeError("loss target voxel count does not match prediction");
  if (classes < 2) throw ShapeError("losses need at least two classes");
  if ((target.classes.array() < 0).any() || (target.classes.array() >= classes).any())
    throw ShapeError("target class index out of range");
}

}  // namespace

template <typename T>
T cross_entropy_loss(const FeatureMap<T>& logits, const LabelMap& target) {
  check_target(logits.voxels(), logits.channels(), target);
  const RowMatrix<T>& z = logits.values;
  const Eigen::Matrix<T, 1, Eigen::Dynamic> m = z.colwise().maxCoeff();
  T total = T(0);
  for (Index v = 0; v < z.cols(); ++v) {
    T s = T(0);
    for (Index c = 0; c < z.rows(); ++c) s += std::exp(z(c, v) - m[v]);
    total += std::log(s) + m[v] - z(target.classes[v], v);
  }
  return total / T(z.cols());
}

template <typename T>
RowMatrix<T> cross_entropy_grad(const FeatureMap<T>& logits, const LabelMap& target) {
  check_target(logits.voxels(), logits.channels(), target);
  RowMatrix<T> g = softmax(logits.values);
  for (Index v = 0; v < g.cols(); ++v) g(target.classes[v], v) -= T(1);
  return g / T(g.cols());
}

template <typename T>
T soft_dice_loss(const RowMatrix<T>& probs, const LabelMap& target) {
  check_target(probs.cols(), probs.rows(), target);
  const auto p = probs.row(1).array();
  const auto g = (target.classes.array() == 1).template cast<T>().transpose();
  const T inter = (p * g).sum();
  const T denom = p.sum() + g.sum() + T(kDiceSmooth);
  return T(1) - (T(2) * inter + T(kDiceSmooth)) / denom;
}

template <typename T>
RowMatrix<T> soft_dice_grad(const RowMatrix<T>& probs, const LabelMap& target) {
  check_target(probs.cols(), probs.rows(), target);
  const auto p = probs.row(1).array();
  const auto g = (target.classes.array() == 1).template cast<T>().transpose();
  const T num = T(2) * (p * g).sum() + T(kDiceSmooth);
  const T denom = p.sum() + g.sum() + T(kDiceSmooth);
  RowMatrix<T> out = RowMatrix<T>::Zero(probs.rows(), probs.cols());
  out.row(1) = (-(T(2) * g * denom - num) / (denom * denom)).matrix();
  return out;
}

template <typename T>
LossResult<T> combined_loss(const std::vector<FeatureMap<T>>& heads, const std::vector<LabelMap>& targets,
                            const std::vector<double>& weights, LossTerms terms) {
  if (heads.size() != targets.size() || heads.size() != weights.size())
    throw ShapeError("combined_loss needs one target and one weight per head");
  LossResult<T> r;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const auto& z = heads[k];
    if (targets[k].dims != z.dims) throw ShapeError("deep-supervision target dims do not match head dims");
    const T w = T(weights[k]);
    T value = T(0);
    RowMatrix<T> grad = RowMatrix<T>::Zero(z.channels(), z.voxels());
    if (terms.cross_entropy) {
      value += cross_entropy_loss(z, targets[k]);
      grad += cross_entropy_grad(z, targets[k]);
    }
    if (terms.dice) {
      const RowMatrix<T> p = softmax(z.values);
      value += soft_dice_loss(p, targets[k]);
      const RowMatrix<T> dp = soft_dice_grad(p, targets[k]);
      // Softmax Jacobian-vector product: dz_c = p_c (dp_c - sum_j p_j dp_j).
      const Eigen::Matrix<T, 1, Eigen::Dynamic> dot = (p.array() * dp.array()).colwise().sum();
      grad += (p.array() * (dp.rowwise() - dot).array()).matrix();
    }
    r.per_head.push_back(value);
    r.total += w * value;
    r.grads.emplace_back(z.dims, grad * w);
  }
  return r;
}

std::vector<LabelMap> deep_supervision_targets(const NetworkConfig& cfg, const LabelMap& labels) {
  std::vector<LabelMap> out;
  for (int k = 0; k < cfg.num_heads(); ++k) out.push_back(downsample_labels(labels, cfg.cumulative_stride(k)));
  return out;
}

template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, const ParamGrads<T>& grads, double lr, double momentum,
              SgdState<T>& state) {
  if (grads.size() != params.size()) throw ShapeError("gradient list does not match parameter list");
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(Vector<T>::Zero(p.value.size()));
  }
  if (state.velocity.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  const T m = T(momentum), step = T(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].value.size() || state.velocity[i].size() != params[i].value.size())
      throw ShapeError("gradient shape mismatch for '" + params[i].name + "'");
    auto& v = state.velocity[i];
    v = m * v + grads[i];
    params[i].value -= step * (grads[i] + m * v);
  }
}

template <typename T>
double accumulate_and_step(std::span<const MicroBatch> micro_batches, Network<T>& net, SgdState<T>& state,
                           double lr, double momentum, int accum_steps, LossTerms terms) {
  if (micro_batches.empty()) throw PreconditionError("accumulate_and_step needs at least one micro-batch");
  if (static_cast<int>(micro_batches.size()) != accum_steps)
    throw PreconditionError("micro-batch count must equal accum_steps");
  const auto weights = ds_weights(net.config());
  ParamGrads<T> sum = net.zero_grads();
  double loss = 0.0;
  for (const auto& mb : micro_batches) {
    ForwardTrace<T> trace;
    const auto heads = forward(net, to_feature_map<T>(mb.input), &trace);
    const auto targets = deep_supervision_targets(net.config(), mb.labels);
    const auto lr_res = combined_loss(heads, targets, weights, terms);
    const auto g = backward(net, trace, lr_res.grads);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g.params[i];
    loss += double(lr_res.total);
  }
  const T inv = T(1) / T(accum_steps);
  for (auto& g : sum) g *= inv;
  sgd_step(net.parameters(), sum, lr, momentum, state);
  return loss / accum_steps;
}

MicroBatch sample_patch(const TrainingCase& c, const Dims3& patch, double foreground_oversample,
                        std::mt19937_64& rng) {
  const Dims3& d = c.input.dims();
  for (int a = 0; a < 3; ++a)
    if (patch[a] > d[a]) throw ShapeError("training patch larger than the case volume");

  Dims3 origin{0, 0, 0};
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  bool centred = false;
  if (coin(rng) < foreground_oversample) {
    std::vector<Index> fg;
    for (Index i = 0; i < c.labels.voxels(); ++i)
      if (c.labels.classes[i] == 1) fg.push_back(i);
    if (!fg.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
      Index v = fg[pick(rng)];
      const Index centre[3] = {v / (d[1] * d[2]), (v / d[2]) % d[1], v % d[2]};
      for (int a = 0; a < 3; ++a) origin[a] = std::clamp<Index>(centre[a] - patch[a] / 2, 0, d[a] - patch[a]);
      centred = true;
    }
  }
  if (!centred) {
    for (int a = 0; a < 3; ++a) {
      std::uniform_int_distribution<Index> o(0, d[a] - patch[a]);
      origin[a] = o(rng);
    }
  }

  MicroBatch mb;
  mb.input.meta = c.input.meta;
  mb.input.meta.dims = patch;
  mb.input.channel_names = c.input.channel_names;
  mb.input.channels.resize(c.input.num_channels(), voxel_count(patch));
  mb.labels.dims = patch;
  mb.labels.classes.resize(voxel_count(patch));
  Index i = 0;
  for (Index z = 0; z < patch[0]; ++z)
    for (Index y = 0; y < patch[1]; ++y) {
      const Index src = ((origin[0] + z) * d[1] + origin[1] + y) * d[2] + origin[2];
      mb.input.channels.middleCols(i, patch[2]) = c.input.channels.middleCols(src, patch[2]);
      mb.labels.classes.segment(i, patch[2]) = c.labels.classes.segment(src, patch[2]);
      i += patch[2];
    }
  return mb;
}

void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,lr,loss,dice\n";
  out.precision(10);
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << e.lr << ',' << e.loss << ',';
    if (std::isnan(e.dice)) out << "nan";
    else out << e.dice;
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

LabelMap predict_volume(const Network<float>& net, const MultiChannelVolume& input) {
  const Triple s = net.config().total_stride();
  const Dims3& d = input.dims();
  Dims3 padded;
  for (int a = 0; a < 3; ++a) padded[a] = (d[a] + s[a] - 1) / s[a] * s[a];
  FeatureMap<float> x(input.num_channels(), padded);
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      x.values.middleCols((z * padded[1] + y) * padded[2], d[2]) = input.channels.middleCols((z * d[1] + y) * d[2], d[2]);
  const auto heads = forward(net, x);
  const RowMatrix<float>& z0 = heads[0].values;
  LabelMap out;
  out.dims = d;
  out.classes.resize(voxel_count(d));
  Index i = 0;
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index xx = 0; xx < d[2]; ++xx, ++i) {
        Index best = 0;
        z0.col((z * padded[1] + y) * padded[2] + xx).maxCoeff(&best);
        out.classes[i] = static_cast<int>(best);
      }
  return out;
}

double dice_coefficient(const LabelMap& prediction, const LabelMap& truth) {
  if (prediction.voxels() != truth.voxels()) throw ShapeError("dice inputs differ in size");
  const auto p = (prediction.classes.array() == 1);
  const auto t = (truth.classes.array() == 1);
  const double inter = double((p && t).count());
  const double total = double(p.count() + t.count());
  return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

TrainHistory train_toy(std::span<const TrainingCase> dataset, Network<float>& net, const TrainConfig& cfg,
                       const TrainingCase* holdout, const EpochCallback& on_epoch) {
  cfg.validate();
  if (dataset.empty()) throw PreconditionError("training dataset is empty");
  for (const auto& c : dataset)
    if (c.input.num_channels() != net.config().in_channels)
      throw ShapeError("training case channel count does not match the network");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_case(0, dataset.size() - 1);
  SgdState<float> state;
  TrainHistory history;
  std::vector<MicroBatch> micro(static_cast<std::size_t>(cfg.accum_steps));
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = poly_lr(epoch, cfg.max_epochs, cfg.lr0, cfg.poly_exponent);
    double loss = 0.0;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      for (auto& mb : micro) mb = sample_patch(dataset[pick_case(rng)], cfg.patch, cfg.foreground_oversample, rng);
      loss += accumulate_and_step<float>(micro, net, state, rec.lr, cfg.momentum, cfg.accum_steps);
    }
    rec.loss = loss / cfg.iterations_per_epoch;
    rec.dice = std::numeric_limits<double>::quiet_NaN();
    const bool last = epoch + 1 == cfg.max_epochs;
    if (holdout != nullptr && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last))
      rec.dice = dice_coefficient(predict_volume(net, holdout->input), holdout->labels);
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

#define SINESEG_INSTANTIATE_TRAIN(T)                                                                             \
  template RowMatrix<T> softmax<T>(const RowMatrix<T>&);                                                         \
  template T cross_entropy_loss<T>(const FeatureMap<T>&, const LabelMap&);                                       \
  template RowMatrix<T> cross_entropy_grad<T>(const FeatureMap<T>&, const LabelMap&);                            \
  template T soft_dice_loss<T>(const RowMatrix<T>&, const LabelMap&);                                            \
  template RowMatrix<T> soft_dice_grad<T>(const RowMatrix<T>&, const LabelMap&);                                 \
  template LossResult<T> combined_loss<T>(const std::vector<FeatureMap<T>>&, const std::vector<LabelMap>&,       \
                                          const std::vector<double>&, LossTerms);                                \
  template void sgd_step<T>(std::vector<Parameter<T>>&, const ParamGrads<T>&, double, double, SgdState<T>&);     \
  template double accumulate_and_step<T>(std::span<const MicroBatch>, Network<T>&, SgdState<T>&, double, double, \
                                         int, LossTerms);

SINESEG_INSTANTIATE_TRAIN(float)
SINESEG_INSTANTIATE_TRAIN(double)

#undef SINESEG_INSTANTIATE_TRAIN

}  // namespace sineseg
