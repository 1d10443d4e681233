#include "sineseg/network.hpp"

#include <cmath>
#include <random>

#include "sineseg/error.hpp"

namespace sineseg {

std::string to_string(ContextBlock c) { return c == ContextBlock::SsmStub ? "ssm_stub" : "none"; }

ContextBlock context_block_from_string(const std::string& s) {
  if (s == "ssm_stub") return ContextBlock::SsmStub;
  if (s == "none") return ContextBlock::None;
  throw ConfigError("unknown context block '" + s + "'");
}

NetworkConfig NetworkConfig::full() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::toy() {
  NetworkConfig c;
  c.n_stages = 4;
  c.features = {8, 16, 32, 32};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
  c.ds_heads = 3;
  return c;
}

void NetworkConfig::validate() const {
  const auto n = static_cast<std::size_t>(n_stages);
  if (n_stages < 2) throw ConfigError("network needs at least 2 stages");
  if (features.size() != n || blocks_per_stage.size() != n || strides.size() != n)
    throw ConfigError("features, blocks_per_stage and strides must each have n_stages entries");
  for (std::size_t s = 0; s < n; ++s) {
    if (features[s] < 1) throw ConfigError("feature counts must be positive");
    if (s > 0 && features[s] < features[s - 1]) throw ConfigError("feature counts must be non-decreasing");
    if (blocks_per_stage[s] < 1) throw ConfigError("each stage needs at least one block");
    for (Index v : strides[s])
      if (v < 1) throw ConfigError("strides must be positive");
  }
  for (Index k : kernel)
    if (k < 1 || k % 2 == 0) throw ConfigError("kernel extents must be positive and odd");
  if (ds_heads < 1 || ds_heads > n_stages - 1) throw ConfigError("ds_heads must lie in [1, n_stages - 1]");
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (out_classes < 2) throw ConfigError("out_classes must be at least 2");
  if (!input_channels.empty() && static_cast<Index>(input_channels.size()) != in_channels)
    throw ConfigError("input_channels names must match in_channels");
}

Triple NetworkConfig::cumulative_stride(int stage) const {
  Triple c{1, 1, 1};
  for (int s = 0; s <= stage; ++s)
    for (int a = 0; a < 3; ++a) c[a] *= strides[static_cast<std::size_t>(s)][a];
  return c;
}

nlohmann::json to_json(const NetworkConfig& cfg) {
  nlohmann::json strides = nlohmann::json::array();
  for (const auto& s : cfg.strides) strides.push_back({s[0], s[1], s[2]});
  return {{"n_stages", cfg.n_stages},
          {"features", cfg.features},
          {"kernel", {cfg.kernel[0], cfg.kernel[1], cfg.kernel[2]}},
          {"blocks_per_stage", cfg.blocks_per_stage},
          {"strides", strides},
          {"deep_supervision", cfg.deep_supervision},
          {"ds_heads", cfg.ds_heads},
          {"context_block", to_string(cfg.context_block)},
          {"in_channels", cfg.in_channels},
          {"out_classes", cfg.out_classes},
          {"seed", cfg.seed},
          {"input_channels", cfg.input_channels}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    c.n_stages = j.at("n_stages").get<int>();
    c.features = j.at("features").get<std::vector<Index>>();
    const auto k = j.at("kernel").get<std::vector<Index>>();
    if (k.size() != 3) throw ConfigError("kernel must have 3 entries");
    c.kernel = {k[0], k[1], k[2]};
    c.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<Index>>();
    c.strides.clear();
    for (const auto& s : j.at("strides")) {
      const auto v = s.get<std::vector<Index>>();
      if (v.size() != 3) throw ConfigError("each stride must have 3 entries");
      c.strides.push_back({v[0], v[1], v[2]});
    }
    c.deep_supervision = j.value("deep_supervision", true);
    c.ds_heads = j.at("ds_heads").get<int>();
    c.context_block = context_block_from_string(j.value("context_block", std::string("ssm_stub")));
    c.in_channels = j.at("in_channels").get<Index>();
    c.out_classes = j.value("out_classes", Index{2});
    c.seed = j.value("seed", std::uint64_t{0});
    c.input_channels = j.value("input_channels", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed network config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<double> ds_weights(const NetworkConfig& cfg) {
  std::vector<double> w(static_cast<std::size_t>(cfg.num_heads()));
  double total = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) total += w[k] = std::ldexp(1.0, -static_cast<int>(k));
  for (auto& v : w) v /= total;
  return w;
}

std::vector<Dims3> head_dims(const NetworkConfig& cfg, const Dims3& input) {
  cfg.validate();
  const Triple total = cfg.total_stride();
  for (int a = 0; a < 3; ++a)
    if (input[a] % total[a] != 0)
      throw ShapeError("input dim " + std::to_string(input[a]) + " is not divisible by the network stride " +
                       std::to_string(total[a]));
  std::vector<Dims3> out;
  for (int k = 0; k < cfg.num_heads(); ++k) {
    const Triple c = cfg.cumulative_stride(k);
    out.push_back({input[0] / c[0], input[1] / c[1], input[2] / c[2]});
  }
  return out;
}

template <typename T>
int Network<T>::add_param(std::string name, std::vector<Index> shape) {
  Index n = 1;
  for (Index v : shape) n *= v;
  params_.push_back({std::move(name), std::move(shape), Vector<T>::Zero(n)});
  return static_cast<int>(params_.size() - 1);
}

template <typename T>
ConvLayer Network<T>::add_conv(const std::string& name, const ConvGeometry& g) {
  ConvLayer l;
  l.geom = g;
  l.weight = add_param(name + ".weight", {g.cout, g.cin, g.kernel[0], g.kernel[1], g.kernel[2]});
  l.bias = add_param(name + ".bias", {g.cout});
  return l;
}

template <typename T>
NormLayer Network<T>::add_norm(const std::string& name, Index c) {
  NormLayer l;
  l.scale = add_param(name + ".scale", {c});
  l.shift = add_param(name + ".shift", {c});
  params_[static_cast<std::size_t>(l.scale)].value.setOnes();
  return l;
}

template <typename T>
Network<T>::Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const Triple pad{cfg_.kernel[0] / 2, cfg_.kernel[1] / 2, cfg_.kernel[2] / 2};
  const auto n = static_cast<std::size_t>(cfg_.n_stages);
  for (std::size_t s = 0; s < n; ++s) {
    EncoderStageLayout stage;
    for (Index b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
      const std::string prefix = "enc" + std::to_string(s) + ".block" + std::to_string(b);
      const Index cin = b > 0 ? cfg_.features[s] : (s == 0 ? cfg_.in_channels : cfg_.features[s - 1]);
      const Index cout = cfg_.features[s];
      const Triple stride = b == 0 ? cfg_.strides[s] : Triple{1, 1, 1};
      ResidualBlockLayout blk;
      blk.conv1 = add_conv(prefix + ".conv1", {cin, cout, cfg_.kernel, stride, pad});
      blk.norm1 = add_norm(prefix + ".norm1", cout);
      blk.conv2 = add_conv(prefix + ".conv2", {cout, cout, cfg_.kernel, {1, 1, 1}, pad});
      blk.norm2 = add_norm(prefix + ".norm2", cout);
      blk.has_proj = cin != cout || stride != Triple{1, 1, 1};
      if (blk.has_proj) blk.proj = add_conv(prefix + ".proj", {cin, cout, {1, 1, 1}, stride, {0, 0, 0}});
      stage.blocks.push_back(blk);
    }
    if (s > 0 && cfg_.context_block == ContextBlock::SsmStub) {
      const std::string prefix = "enc" + std::to_string(s) + ".context";
      stage.has_context = true;
      stage.context.theta = add_param(prefix + ".theta", {cfg_.features[s]});
      stage.context.beta = add_param(prefix + ".beta", {cfg_.features[s]});
      stage.context.gamma = add_param(prefix + ".gamma", {cfg_.features[s]});
    }
    encoder_.push_back(std::move(stage));
  }
  decoder_.resize(n - 1);
  for (std::size_t s = n - 1; s-- > 0;) {
    DecoderStageLayout& d = decoder_[s];
    const std::string prefix = "dec" + std::to_string(s);
    const Index below = cfg_.features[s + 1];
    const Index c = cfg_.features[s];
    d.up_stride = cfg_.strides[s + 1];
    d.up_cout = c;
    d.up_weight = add_param(prefix + ".up.weight", {below, c, d.up_stride[0], d.up_stride[1], d.up_stride[2]});
    d.up_bias = add_param(prefix + ".up.bias", {c});
    d.conv = add_conv(prefix + ".conv", {2 * c, c, cfg_.kernel, {1, 1, 1}, pad});
    d.norm = add_norm(prefix + ".norm", c);
    if (static_cast<int>(s) < cfg_.num_heads()) {
      d.has_head = true;
      d.head = add_conv("head" + std::to_string(s), {c, cfg_.out_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}});
    }
  }
}

template <typename T>
Parameter<T>& Network<T>::parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ConfigError("network has no parameter named '" + name + "'");
}

template <typename T>
const Parameter<T>& Network<T>::parameter(const std::string& name) const {
  return const_cast<Network<T>*>(this)->parameter(name);
}

template <typename T>
Index Network<T>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
ParamGrads<T> Network<T>::zero_grads() const {
  ParamGrads<T> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(Vector<T>::Zero(p.value.size()));
  return g;
}

template <typename T>
bool Network<T>::all_finite() const {
  for (const auto& p : params_)
    if (!p.value.allFinite()) return false;
  return true;
}

template <typename T>
Network<T> build_network(const NetworkConfig& cfg) {
  Network<T> net(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& p : net.parameters()) {
    const bool conv_weight = p.name.ends_with(".weight") && p.shape.size() == 5;
    if (conv_weight) {
      // Fan-in: input channels times kernel volume; for the upsampling
      // convs (layout [cin, cout, k...]) each output sees cin inputs.
      const bool transposed = p.name.ends_with(".up.weight");
      const double fan_in =
          transposed ? double(p.shape[0]) : double(p.shape[1] * p.shape[2] * p.shape[3] * p.shape[4]);
      const double std = std::sqrt(2.0 / fan_in);
      for (Index i = 0; i < p.value.size(); ++i) p.value[i] = T(normal(rng) * std);
    } else if (p.name.ends_with(".beta")) {
      p.value.setOnes();
    } else if (p.name.ends_with(".gamma")) {
      p.value.setConstant(T(0.1));
    }
  }
  return net;
}

template <typename T>
FeatureMap<T> residual_block_forward(const Network<T>& net, const ResidualBlockLayout& blk, const FeatureMap<T>& x,
                                     ResidualBlockCache<T>* cache) {
  FeatureMap<T> a1, a2, pre1, out;
  conv3d_forward(x, blk.conv1.geom, net.data(blk.conv1.weight), net.data(blk.conv1.bias), a1);
  pre1.dims = a1.dims;
  InstanceNormCache<T> n1, n2;
  instance_norm_forward(a1.values, net.data(blk.norm1.scale), net.data(blk.norm1.shift), pre1.values,
                        cache ? &n1 : nullptr);
  FeatureMap<T> act1 = pre1;
  leaky_relu_inplace(act1.values);
  conv3d_forward(act1, blk.conv2.geom, net.data(blk.conv2.weight), net.data(blk.conv2.bias), a2);
  out.dims = a2.dims;
  instance_norm_forward(a2.values, net.data(blk.norm2.scale), net.data(blk.norm2.shift), out.values,
                        cache ? &n2 : nullptr);
  if (blk.has_proj) {
    FeatureMap<T> sc;
    conv3d_forward(x, blk.proj.geom, net.data(blk.proj.weight), net.data(blk.proj.bias), sc);
    out.values += sc.values;
  } else {
    if (x.values.rows() != out.values.rows() || x.values.cols() != out.values.cols())
      throw ShapeError("identity shortcut shape mismatch");
    out.values += x.values;
  }
  if (cache != nullptr) {
    cache->input = x;
    cache->pre1 = std::move(pre1);
    cache->act1 = act1;
    cache->norm1 = std::move(n1);
    cache->norm2 = std::move(n2);
    cache->sum = out.values;
  }
  leaky_relu_inplace(out.values);
  return out;
}

template <typename T>
FeatureMap<T> residual_block_backward(const Network<T>& net, const ResidualBlockLayout& blk,
                                      const ResidualBlockCache<T>& c, const RowMatrix<T>& dout,
                                      ParamGrads<T>& grads) {
  auto g = [&grads](int i) { return grads[static_cast<std::size_t>(i)].data(); };
  const RowMatrix<T> dsum = leaky_relu_backward(c.sum, dout);
  RowMatrix<T> da2;
  instance_norm_backward(c.norm2, net.data(blk.norm2.scale), dsum, da2, g(blk.norm2.scale), g(blk.norm2.shift));
  FeatureMap<T> dact1;
  conv3d_backward(c.act1, blk.conv2.geom, net.data(blk.conv2.weight), da2, g(blk.conv2.weight), g(blk.conv2.bias),
                  &dact1);
  const RowMatrix<T> dpre1 = leaky_relu_backward(c.pre1.values, dact1.values);
  RowMatrix<T> da1;
  instance_norm_backward(c.norm1, net.data(blk.norm1.scale), dpre1, da1, g(blk.norm1.scale), g(blk.norm1.shift));
  FeatureMap<T> dx;
  conv3d_backward(c.input, blk.conv1.geom, net.data(blk.conv1.weight), da1, g(blk.conv1.weight), g(blk.conv1.bias),
                  &dx);
  if (blk.has_proj) {
    FeatureMap<T> dsc;
    conv3d_backward(c.input, blk.proj.geom, net.data(blk.proj.weight), dsum, g(blk.proj.weight), g(blk.proj.bias),
                    &dsc);
    dx.values += dsc.values;
  } else {
    dx.values += dsum;
  }
  return dx;
}

template <typename T>
FeatureMap<T> context_block_forward(const Network<T>& net, const ContextLayout& ctx, const FeatureMap<T>& x,
                                    RowMatrix<T>* hidden) {
  FeatureMap<T> y;
  y.dims = x.dims;
  linear_scan_forward(x.values, net.data(ctx.theta), net.data(ctx.beta), net.data(ctx.gamma), y.values, hidden);
  return y;
}

template <typename T>
std::vector<FeatureMap<T>> forward(const Network<T>& net, const FeatureMap<T>& input, ForwardTrace<T>* trace) {
  const NetworkConfig& cfg = net.config();
  if (input.channels() != cfg.in_channels)
    throw ShapeError("network expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(input.channels()));
  head_dims(cfg, input.dims);  // divisibility check

  const auto n = static_cast<std::size_t>(cfg.n_stages);
  if (trace != nullptr) {
    *trace = ForwardTrace<T>{};
    trace->input = input;
    trace->blocks.resize(n);
    trace->context_input.resize(n);
    trace->context_hidden.resize(n);
    trace->decoder.resize(n - 1);
  }
  std::vector<FeatureMap<T>> stage_out(n);
  FeatureMap<T> x = input;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& stage = net.encoder()[s];
    for (const auto& blk : stage.blocks) {
      if (trace != nullptr) {
        trace->blocks[s].emplace_back();
        x = residual_block_forward(net, blk, x, &trace->blocks[s].back());
      } else {
        x = residual_block_forward(net, blk, x);
      }
    }
    if (stage.has_context) {
      if (trace != nullptr) {
        trace->context_input[s] = x;
        x = context_block_forward(net, stage.context, x, &trace->context_hidden[s]);
      } else {
        x = context_block_forward(net, stage.context, x);
      }
    }
    stage_out[s] = x;
  }

  std::vector<FeatureMap<T>> heads(static_cast<std::size_t>(cfg.num_heads()));
  FeatureMap<T> below = stage_out[n - 1];
  for (std::size_t s = n - 1; s-- > 0;) {
    const auto& d = net.decoder()[s];
    const FeatureMap<T>& skip = stage_out[s];
    FeatureMap<T> up;
    conv_transpose3d_forward(below, d.up_cout, d.up_stride, net.data(d.up_weight), net.data(d.up_bias), up);
    if (up.dims != skip.dims) throw ShapeError("decoder upsampling does not match skip dims");
    FeatureMap<T> cat(up.channels() + skip.channels(), skip.dims);
    cat.values.topRows(up.channels()) = up.values;
    cat.values.bottomRows(skip.channels()) = skip.values;
    FeatureMap<T> conv;
    conv3d_forward(cat, d.conv.geom, net.data(d.conv.weight), net.data(d.conv.bias), conv);
    FeatureMap<T> pre;
    pre.dims = conv.dims;
    InstanceNormCache<T> nc;
    instance_norm_forward(conv.values, net.data(d.norm.scale), net.data(d.norm.shift), pre.values,
                          trace ? &nc : nullptr);
    FeatureMap<T> out = pre;
    leaky_relu_inplace(out.values);
    if (d.has_head) conv3d_forward(out, d.head.geom, net.data(d.head.weight), net.data(d.head.bias), heads[s]);
    if (trace != nullptr) {
      auto& dc = trace->decoder[s];
      dc.below = std::move(below);
      dc.concat = std::move(cat);
      dc.pre = std::move(pre);
      dc.norm = std::move(nc);
      dc.out = out;
    }
    below = std::move(out);
  }
  if (trace != nullptr) trace->stage_out = std::move(stage_out);
  return heads;
}

template <typename T>
Gradients<T> backward(const Network<T>& net, const ForwardTrace<T>& trace,
                      const std::vector<FeatureMap<T>>& head_grads) {
  const NetworkConfig& cfg = net.config();
  const auto n = static_cast<std::size_t>(cfg.n_stages);
  if (head_grads.size() != static_cast<std::size_t>(cfg.num_heads()))
    throw ShapeError("backward needs one upstream gradient per head");
  if (trace.decoder.size() != n - 1) throw ShapeError("backward called without a recorded forward trace");

  Gradients<T> out;
  out.params = net.zero_grads();
  auto g = [&out](int i) { return out.params[static_cast<std::size_t>(i)].data(); };

  std::vector<RowMatrix<T>> d_skip(n - 1);
  FeatureMap<T> d_lower;  // gradient flowing into the output of decoder scale s from scale s-1
  for (std::size_t s = 0; s + 1 < n; ++s) {
    const auto& d = net.decoder()[s];
    const auto& dc = trace.decoder[s];
    RowMatrix<T> d_out = s > 0 ? d_lower.values : RowMatrix<T>::Zero(dc.out.channels(), dc.out.voxels());
    if (d.has_head) {
      const auto& hg = head_grads[s];
      FeatureMap<T> dh;
      conv3d_backward(dc.out, d.head.geom, net.data(d.head.weight), hg.values, g(d.head.weight), g(d.head.bias),
                      &dh);
      d_out += dh.values;
    }
    const RowMatrix<T> d_pre = leaky_relu_backward(dc.pre.values, d_out);
    RowMatrix<T> d_conv;
    instance_norm_backward(dc.norm, net.data(d.norm.scale), d_pre, d_conv, g(d.norm.scale), g(d.norm.shift));
    FeatureMap<T> d_cat;
    conv3d_backward(dc.concat, d.conv.geom, net.data(d.conv.weight), d_conv, g(d.conv.weight), g(d.conv.bias),
                    &d_cat);
    const Index cu = d.up_cout;
    d_skip[s] = d_cat.values.bottomRows(d_cat.channels() - cu);
    const RowMatrix<T> d_up = d_cat.values.topRows(cu);
    d_lower = FeatureMap<T>();
    conv_transpose3d_backward(dc.below, d.up_cout, d.up_stride, net.data(d.up_weight), d_up, g(d.up_weight),
                              g(d.up_bias), &d_lower);
  }

  RowMatrix<T> d = std::move(d_lower.values);  // gradient on the bottleneck output
  for (std::size_t s = n; s-- > 0;) {
    if (s + 1 < n) d += d_skip[s];
    const auto& stage = net.encoder()[s];
    if (stage.has_context) {
      RowMatrix<T> dx;
      linear_scan_backward(trace.context_input[s].values, trace.context_hidden[s], net.data(stage.context.theta),
                           net.data(stage.context.beta), net.data(stage.context.gamma), d, dx,
                           g(stage.context.theta), g(stage.context.beta), g(stage.context.gamma));
      d = std::move(dx);
    }
    for (std::size_t b = stage.blocks.size(); b-- > 0;) {
      FeatureMap<T> dx = residual_block_backward(net, stage.blocks[b], trace.blocks[s][b], d, out.params);
      d = std::move(dx.values);
    }
  }
  out.input = FeatureMap<T>(trace.input.dims, std::move(d));
  return out;
}

#define SINESEG_INSTANTIATE_NETWORK(T)                                                                          \
  template class Network<T>;                                                                                    \
  template Network<T> build_network<T>(const NetworkConfig&);                                                   \
  template FeatureMap<T> residual_block_forward<T>(const Network<T>&, const ResidualBlockLayout&,               \
                                                   const FeatureMap<T>&, ResidualBlockCache<T>*);               \
  template FeatureMap<T> residual_block_backward<T>(const Network<T>&, const ResidualBlockLayout&,              \
                                                    const ResidualBlockCache<T>&, const RowMatrix<T>&,          \
                                                    ParamGrads<T>&);                                            \
  template FeatureMap<T> context_block_forward<T>(const Network<T>&, const ContextLayout&, const FeatureMap<T>&, \
                                                  RowMatrix<T>*);                                               \
  template std::vector<FeatureMap<T>> forward<T>(const Network<T>&, const FeatureMap<T>&, ForwardTrace<T>*);    \
  template Gradients<T> backward<T>(const Network<T>&, const ForwardTrace<T>&, const std::vector<FeatureMap<T>>&);

SINESEG_INSTANTIATE_NETWORK(float)
SINESEG_INSTANTIATE_NETWORK(double)

#undef SINESEG_INSTANTIATE_NETWORK

}  // namespace sineseg
