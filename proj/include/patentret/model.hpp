#pragma once

// Retrieval network: convolutional backbone -> GeM pooling -> neck (FC then BN)
// -> classification head (softmax or additive angular margin). At inference
// the FC output, before BN, is the retrieval feature.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "patentret/graph.hpp"
#include "patentret/ops.hpp"
#include "patentret/rng.hpp"
#include "patentret/tensor.hpp"

namespace patentret {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct BackboneConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::size_t blocks_per_stage = 1;
  std::size_t input_size = 64;

  std::size_t out_channels() const { return stage_channels.back(); }

  void validate() const {
    if (stage_channels.size() < 2) throw ConfigError("backbone needs at least 2 stages");
    for (auto c : stage_channels)
      if (c == 0) throw ConfigError("backbone stage with zero channels");
    if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
  }
};

enum class HeadKind { softmax, arcface };

inline std::string to_string(HeadKind k) { return k == HeadKind::softmax ? "softmax" : "arcface"; }

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "softmax") return HeadKind::softmax;
  if (s == "arcface") return HeadKind::arcface;
  throw ConfigError("unknown head kind '" + s + "' (expected softmax or arcface)");
}

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t embed_dim = 512;
  HeadKind head = HeadKind::arcface;
  std::size_t num_classes = 2;
  double scale = 20.0;
  double margin = 0.5;
  double gem_init = 3.0;

  void validate() const {
    backbone.validate();
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
    if (num_classes < 2) throw ConfigError("head needs at least 2 classes");
    if (!(scale > 0)) throw ConfigError("arcface scale must be > 0");
    if (!(margin >= 0 && margin < std::numbers::pi)) throw ConfigError("arcface margin must lie in [0, pi)");
    if (!(gem_init > 0)) throw ConfigError("GeM exponent must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"stage_channels", c.stage_channels},
       {"blocks_per_stage", c.blocks_per_stage},
       {"input_size", c.input_size}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
  c.input_size = j.value("input_size", c.input_size);
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"backbone", c.backbone}, {"embed_dim", c.embed_dim},       {"head", to_string(c.head)},
       {"num_classes", c.num_classes}, {"scale", c.scale}, {"margin", c.margin},
       {"gem_init", c.gem_init}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  if (j.contains("head")) c.head = head_kind_from_string(j.at("head").get<std::string>());
  c.num_classes = j.value("num_classes", c.num_classes);
  c.scale = j.value("scale", c.scale);
  c.margin = j.value("margin", c.margin);
  c.gem_init = j.value("gem_init", c.gem_init);
}

/// Lower bound enforced on every GeM exponent after an optimizer step.
inline constexpr double kGemMinExponent = 0.05;
inline constexpr double kGemEps = 1e-6;

template <class T>
struct ModelParams {
  ModelConfig config;
  std::vector<Tensor<T>> conv_weight;  // [out, in, 3, 3] per conv layer
  std::vector<Tensor<T>> conv_bias;    // [out]
  Tensor<T> gem_p;                     // [n]
  Tensor<T> fc_weight;                 // [n, d]
  Tensor<T> fc_bias;                   // [d]
  Tensor<T> bn_gamma;                  // [d]
  Tensor<T> bn_beta;                   // [d]
  BatchNormState<T> bn;
  Tensor<T> head_weight;               // [d, C]
  Tensor<T> head_bias;                 // [C], softmax head only

  /// Learnable tensors in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t i = 0; i < conv_weight.size(); ++i) {
      out.emplace_back("backbone.conv" + std::to_string(i) + ".weight", &conv_weight[i]);
      out.emplace_back("backbone.conv" + std::to_string(i) + ".bias", &conv_bias[i]);
    }
    out.emplace_back("gem.p", &gem_p);
    out.emplace_back("neck.fc.weight", &fc_weight);
    out.emplace_back("neck.fc.bias", &fc_bias);
    out.emplace_back("neck.bn.gamma", &bn_gamma);
    out.emplace_back("neck.bn.beta", &bn_beta);
    out.emplace_back("head.weight", &head_weight);
    if (config.head == HeadKind::softmax) out.emplace_back("head.bias", &head_bias);
    return out;
  }

  /// Trainable tensors plus non-learned state (BN running statistics).
  std::vector<std::pair<std::string, Tensor<T>*>> all_tensors() {
    auto out = trainable();
    out.emplace_back("neck.bn.running_mean", &bn.running_mean);
    out.emplace_back("neck.bn.running_var", &bn.running_var);
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : trainable()) t->zero_grad();
  }
};

namespace detail {

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

/// Fan-in scaled uniform init (bound sqrt(6 / fan_in), suited to ReLU),
/// zero biases, GeM p = gem_init, BN gamma = 1 and beta = 0.
template <class T = float>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams<T> p;
  p.config = config;
  std::size_t in_ch = 1;
  for (std::size_t out_ch : config.backbone.stage_channels) {
    for (std::size_t b = 0; b < config.backbone.blocks_per_stage; ++b) {
      const std::size_t fan_in = in_ch * 9;
      p.conv_weight.push_back(detail::uniform_tensor<T>({out_ch, in_ch, 3, 3}, std::sqrt(6.0 / fan_in), rng));
      p.conv_bias.emplace_back(Shape{out_ch}, T{0});
      in_ch = out_ch;
    }
  }
  const std::size_t n = config.backbone.out_channels(), d = config.embed_dim, c = config.num_classes;
  p.gem_p = Tensor<T>(Shape{n}, static_cast<T>(config.gem_init));
  p.fc_weight = detail::uniform_tensor<T>({n, d}, std::sqrt(6.0 / n), rng);
  p.fc_bias = Tensor<T>(Shape{d}, T{0});
  p.bn_gamma = Tensor<T>(Shape{d}, T{1});
  p.bn_beta = Tensor<T>(Shape{d}, T{0});
  p.bn = BatchNormState<T>(d);
  p.head_weight = detail::uniform_tensor<T>({d, c}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.head_bias = Tensor<T>(Shape{c}, T{0});
  for (auto& [name, t] : p.trainable()) t->requires_grad = true;
  return p;
}

/// 3x3 convs with ReLU; the first conv of each stage has stride 2.
template <class T>
Var<T> backbone_forward(Var<T> input, ModelParams<T>& params) {
  const auto& shape = input.shape();
  require_rank(shape, 4, "backbone input");
  if (shape[1] != 1) throw ShapeError("backbone expects single-channel input, got " + to_string(shape));
  const std::size_t stages = params.config.backbone.stage_channels.size();
  const std::size_t min_side = std::size_t{1} << stages;
  if (shape[2] < min_side || shape[3] < min_side)
    throw ShapeError("input " + to_string(shape) + " too small for " + std::to_string(stages) +
                     " stride-2 stages (need >= " + std::to_string(min_side) + ")");
  Graph<T>& g = *input.graph;
  // Channels-last inside the backbone; with one input channel the NCHW batch
  // already has NHWC layout.
  Var<T> x = reshape(input, Shape{shape[0], shape[2], shape[3], 1});
  const std::size_t per_stage = params.config.backbone.blocks_per_stage;
  for (std::size_t i = 0; i < params.conv_weight.size(); ++i) {
    const std::size_t stride = i % per_stage == 0 ? 2 : 1;
    x = conv_bias_relu(x, g.param(params.conv_weight[i]), g.param(params.conv_bias[i]), stride, 1);
  }
  return nhwc_to_nchw(x);
}

template <class T>
Var<T> gem_forward(Var<T> featmaps, ModelParams<T>& params) {
  return gem_pool(featmaps, featmaps.graph->param(params.gem_p), static_cast<T>(kGemEps));
}

template <class T>
struct NeckOutput {
  Var<T> retrieval_feature;  // FC output, used for search
  Var<T> head_input;         // BN(FC output), feeds the loss head only
};

template <class T>
NeckOutput<T> neck_forward(Var<T> pooled, ModelParams<T>& params, bool train) {
  Graph<T>& g = *pooled.graph;
  Var<T> fc = add_bias(matmul(pooled, g.param(params.fc_weight)), g.param(params.fc_bias));
  Var<T> bn = batchnorm(fc, g.param(params.bn_gamma), g.param(params.bn_beta), params.bn, train);
  return {fc, bn};
}

template <class T>
Var<T> softmax_logits(Var<T> head_input, ModelParams<T>& params) {
  Graph<T>& g = *head_input.graph;
  return add_bias(matmul(head_input, g.param(params.head_weight)), g.param(params.head_bias));
}

/// Mean cross-entropy over W^T x + b.
template <class T>
Var<T> softmax_ce_loss(Var<T> head_input, std::span<const int> labels, ModelParams<T>& params) {
  if (params.config.head != HeadKind::softmax) throw ConfigError("softmax_ce_loss needs a softmax head");
  return cross_entropy(softmax_logits(head_input, params), labels);
}

/// Cosine matrix between L2-normalized features [N,d] and L2-normalized
/// class columns of W [d,C].
template <class T>
Var<T> arcface_cosines(Var<T> head_input, Var<T> weight) {
  return matmul(l2_normalize(head_input, 1), l2_normalize(weight, 0));
}

template <class T>
Var<T> arcface_logits(Var<T> head_input, std::span<const int> labels, ModelParams<T>& params) {
  Graph<T>& g = *head_input.graph;
  return arcface_margin(arcface_cosines(head_input, g.param(params.head_weight)), labels,
                        static_cast<T>(params.config.scale), static_cast<T>(params.config.margin));
}

/// Cross-entropy over s*cos(theta_y + margin) (target) and s*cos(theta_j).
template <class T>
Var<T> arcface_loss(Var<T> head_input, std::span<const int> labels, ModelParams<T>& params) {
  if (params.config.head != HeadKind::arcface) throw ConfigError("arcface_loss needs an arcface head");
  return cross_entropy(arcface_logits(head_input, labels, params), labels);
}

template <class T>
Var<T> head_loss(Var<T> head_input, std::span<const int> labels, ModelParams<T>& params) {
  return params.config.head == HeadKind::softmax ? softmax_ce_loss(head_input, labels, params)
                                                 : arcface_loss(head_input, labels, params);
}

template <class T>
struct ForwardResult {
  Var<T> featmaps;
  Var<T> pooled;
  NeckOutput<T> neck;
};

template <class T>
ForwardResult<T> model_forward(Var<T> input, ModelParams<T>& params, bool train) {
  ForwardResult<T> r;
  r.featmaps = backbone_forward(input, params);
  r.pooled = gem_forward(r.featmaps, params);
  r.neck = neck_forward(r.pooled, params, train);
  return r;
}

/// Eval-mode retrieval features [N,d] for a batch [N,1,H,W]. Parameters are
/// read only; nothing is recorded for differentiation.
template <class T>
Tensor<T> extract_features(const Tensor<T>& batch, const ModelParams<T>& params) {
  // Eval mode writes neither parameters nor BN running statistics.
  auto& mutable_params = const_cast<ModelParams<T>&>(params);
  Graph<T> g(/*grad_enabled=*/false);
  auto r = model_forward(g.constant(batch), mutable_params, /*train=*/false);
  return r.neck.retrieval_feature.value();
}

}  // namespace patentret
