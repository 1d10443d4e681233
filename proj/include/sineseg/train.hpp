#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "sineseg/network.hpp"

namespace sineseg {

inline constexpr double kDiceSmooth = 1e-5;

// Per-voxel class indices on a 3D grid.
struct LabelMap {
  Dims3 dims{1, 1, 1};
  Eigen::VectorXi classes;

  Index voxels() const { return classes.size(); }
};

LabelMap label_map_from_volume(const Volume& labels);

// Nearest-neighbour downsampling by integer factors; sample i maps to
// source index i*f + f/2.
LabelMap downsample_labels(const LabelMap& labels, const Triple& factor);

struct TrainConfig {
  double lr0 = 0.01;
  double poly_exponent = 0.9;
  int max_epochs = 1100;
  int batch_size = 8;
  int accum_steps = 8;
  double momentum = 0.99;
  std::uint64_t seed = 0;
  int iterations_per_epoch = 250;  // optimizer steps per epoch
  Dims3 patch{112, 160, 128};
  double foreground_oversample = 0.33;  // probability a micro-batch is centred on a lesion voxel
  int eval_every = 1;  // held-out Dice cadence in epochs; 0 disables

  static TrainConfig full() { return TrainConfig{}; }
  static TrainConfig toy();

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
void update_from_json(TrainConfig& c, const nlohmann::json& j);

// lr0 * (1 - epoch / max_epochs)^exponent.
double poly_lr(int epoch, int max_epochs, double lr0, double exponent);

template <typename T>
RowMatrix<T> softmax(const RowMatrix<T>& logits);

// Mean over voxels of -log softmax(logits)[target].
template <typename T>
T cross_entropy_loss(const FeatureMap<T>& logits, const LabelMap& target);
template <typename T>
RowMatrix<T> cross_entropy_grad(const FeatureMap<T>& logits, const LabelMap& target);

// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps) over the foreground class (row 1).
template <typename T>
T soft_dice_loss(const RowMatrix<T>& probs, const LabelMap& target);
// Gradient with respect to the probability maps (only row 1 is non-zero).
template <typename T>
RowMatrix<T> soft_dice_grad(const RowMatrix<T>& probs, const LabelMap& target);

struct LossTerms {
  bool cross_entropy = true;
  bool dice = true;
};

template <typename T>
struct LossResult {
  T total = T(0);
  std::vector<T> per_head;
  std::vector<FeatureMap<T>> grads;  // dL/dlogits per head
};

// sum_k w_k (CE_k + Dice_k); targets[k] must match heads[k] dims.
template <typename T>
LossResult<T> combined_loss(const std::vector<FeatureMap<T>>& heads, const std::vector<LabelMap>& targets,
                            const std::vector<double>& weights, LossTerms terms = {});

// Deep-supervision targets for every head of cfg.
std::vector<LabelMap> deep_supervision_targets(const NetworkConfig& cfg, const LabelMap& labels);

template <typename T>
struct SgdState {
  ParamGrads<T> velocity;
};

// Nesterov: v <- m v + g; p <- p - lr (g + m v).
template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, const ParamGrads<T>& grads, double lr, double momentum,
              SgdState<T>& state);

struct MicroBatch {
  MultiChannelVolume input;
  LabelMap labels;
};

// Averages gradients over the micro-batches and applies one optimizer step.
// Returns the mean combined loss.
template <typename T>
double accumulate_and_step(std::span<const MicroBatch> micro_batches, Network<T>& net, SgdState<T>& state,
                           double lr, double momentum, int accum_steps, LossTerms terms = {});

struct TrainingCase {
  MultiChannelVolume input;
  LabelMap labels;
};

MicroBatch sample_patch(const TrainingCase& c, const Dims3& patch, double foreground_oversample,
                        std::mt19937_64& rng);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double dice = 0.0;  // NaN when not evaluated this epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

void write_history_csv(const TrainHistory& h, const std::filesystem::path& path);

// Foreground class map of head 0 for a whole volume, zero-padding up to the
// network stride and cropping back.
LabelMap predict_volume(const Network<float>& net, const MultiChannelVolume& input);

double dice_coefficient(const LabelMap& prediction, const LabelMap& truth);

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainHistory train_toy(std::span<const TrainingCase> dataset, Network<float>& net, const TrainConfig& cfg,
                       const TrainingCase* holdout = nullptr, const EpochCallback& on_epoch = {});

}  // namespace sineseg
