#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sineseg/feature_map.hpp"
#include "sineseg/layers.hpp"

namespace sineseg {

enum class ContextBlock { None, SsmStub };

std::string to_string(ContextBlock c);
ContextBlock context_block_from_string(const std::string& s);

struct NetworkConfig {
  int n_stages = 6;
  std::vector<Index> features{32, 64, 128, 256, 320, 320};
  Triple kernel{3, 3, 3};
  std::vector<Index> blocks_per_stage{1, 3, 4, 6, 6, 6};
  std::vector<Triple> strides{{1, 1, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 2, 2}};
  bool deep_supervision = true;
  int ds_heads = 4;
  ContextBlock context_block = ContextBlock::SsmStub;
  Index in_channels = 4;
  Index out_classes = 2;
  std::uint64_t seed = 0;
  // Names of the assembled input channels the network consumes, in order.
  std::vector<std::string> input_channels{"ct", "pet", "sin20", "sin30"};

  // Full-scale residual-encoder plan.
  static NetworkConfig full();
  // Four-stage desk-scale network for training on phantoms.
  static NetworkConfig toy();

  void validate() const;  // ConfigError on violation
  int num_heads() const { return deep_supervision ? ds_heads : 1; }
  // Product of strides over stages 0..stage.
  Triple cumulative_stride(int stage) const;
  // Per-axis product of all strides; input dims must be divisible by it.
  Triple total_stride() const { return cumulative_stride(n_stages - 1); }
};

nlohmann::json to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);

// Loss weights for the supervised heads: w_k proportional to 2^-k, summing to 1.
std::vector<double> ds_weights(const NetworkConfig& cfg);

// Dims of every output head for a given input; ShapeError when indivisible.
std::vector<Dims3> head_dims(const NetworkConfig& cfg, const Dims3& input);

template <typename T>
struct Parameter {
  std::string name;
  std::vector<Index> shape;
  Vector<T> value;
};

template <typename T>
using ParamGrads = std::vector<Vector<T>>;

struct ConvLayer {
  int weight = -1;
  int bias = -1;
  ConvGeometry geom;
};

struct NormLayer {
  int scale = -1;
  int shift = -1;
};

struct ResidualBlockLayout {
  ConvLayer conv1;
  NormLayer norm1;
  ConvLayer conv2;
  NormLayer norm2;
  bool has_proj = false;
  ConvLayer proj;
};

struct ContextLayout {
  int theta = -1;
  int beta = -1;
  int gamma = -1;
};

struct EncoderStageLayout {
  std::vector<ResidualBlockLayout> blocks;
  bool has_context = false;
  ContextLayout context;
};

struct DecoderStageLayout {
  int up_weight = -1;
  int up_bias = -1;
  Triple up_stride{2, 2, 2};
  Index up_cout = 0;
  ConvLayer conv;
  NormLayer norm;
  bool has_head = false;
  ConvLayer head;
};

// Residual-encoder U-Net: encoder stage s runs blocks_per_stage[s] residual
// blocks (the first one strided), optionally followed by a context block;
// decoder stage s upsamples from s+1, concatenates skip s and applies one
// conv-norm-act; heads are 1x1x1 convs on the highest-resolution scales.
template <typename T>
class Network {
 public:
  explicit Network(NetworkConfig cfg);

  const NetworkConfig& config() const { return cfg_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  Parameter<T>& parameter(const std::string& name);
  const Parameter<T>& parameter(const std::string& name) const;
  const T* data(int index) const { return params_[static_cast<std::size_t>(index)].value.data(); }

  Index parameter_count() const;
  ParamGrads<T> zero_grads() const;
  bool all_finite() const;

  const std::vector<EncoderStageLayout>& encoder() const { return encoder_; }
  const std::vector<DecoderStageLayout>& decoder() const { return decoder_; }  // index = scale

  template <typename U>
  Network<U> cast() const {
    Network<U> out(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i].value = params_[i].value.template cast<U>();
    return out;
  }

 private:
  int add_param(std::string name, std::vector<Index> shape);
  ConvLayer add_conv(const std::string& name, const ConvGeometry& g);
  NormLayer add_norm(const std::string& name, Index c);

  NetworkConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::vector<EncoderStageLayout> encoder_;
  std::vector<DecoderStageLayout> decoder_;
};

// Structure from cfg, He-normal conv weights (seeded), zero biases, unit norm
// scales, zero shifts; context blocks start at lambda 0.5, beta 1, gamma 0.1.
template <typename T>
Network<T> build_network(const NetworkConfig& cfg);

template <typename T>
struct ResidualBlockCache {
  FeatureMap<T> input;
  FeatureMap<T> pre1;  // norm1 output, before activation
  FeatureMap<T> act1;  // conv2 input
  InstanceNormCache<T> norm1;
  InstanceNormCache<T> norm2;
  RowMatrix<T> sum;  // norm2 output + shortcut, before activation
};

template <typename T>
FeatureMap<T> residual_block_forward(const Network<T>& net, const ResidualBlockLayout& block, const FeatureMap<T>& x,
                                     ResidualBlockCache<T>* cache = nullptr);

// Returns dL/dx; parameter gradients accumulate into grads.
template <typename T>
FeatureMap<T> residual_block_backward(const Network<T>& net, const ResidualBlockLayout& block,
                                      const ResidualBlockCache<T>& cache, const RowMatrix<T>& dout,
                                      ParamGrads<T>& grads);

template <typename T>
FeatureMap<T> context_block_forward(const Network<T>& net, const ContextLayout& ctx, const FeatureMap<T>& x,
                                    RowMatrix<T>* hidden = nullptr);

template <typename T>
struct DecoderCache {
  FeatureMap<T> below;  // input to the upsampling conv
  FeatureMap<T> concat;
  FeatureMap<T> pre;  // norm output, before activation
  InstanceNormCache<T> norm;
  FeatureMap<T> out;
};

// Activations recorded by forward() for backward().
template <typename T>
struct ForwardTrace {
  FeatureMap<T> input;
  std::vector<std::vector<ResidualBlockCache<T>>> blocks;
  std::vector<FeatureMap<T>> context_input;
  std::vector<RowMatrix<T>> context_hidden;
  std::vector<FeatureMap<T>> stage_out;
  std::vector<DecoderCache<T>> decoder;  // index = scale
};

// Logit maps for each head, full resolution first.
template <typename T>
std::vector<FeatureMap<T>> forward(const Network<T>& net, const FeatureMap<T>& input,
                                   ForwardTrace<T>* trace = nullptr);

template <typename T>
struct Gradients {
  ParamGrads<T> params;
  FeatureMap<T> input;
};

template <typename T>
Gradients<T> backward(const Network<T>& net, const ForwardTrace<T>& trace,
                      const std::vector<FeatureMap<T>>& head_grads);

// Single file: 8-byte magic, u64 little-endian manifest length, JSON
// manifest (config + parameter names/shapes/offsets), float32 LE blob.
void save_network(const Network<float>& net, const std::filesystem::path& path);
Network<float> load_network(const std::filesystem::path& path);

}  // namespace sineseg
