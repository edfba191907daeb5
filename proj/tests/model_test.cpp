#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "patentret/model.hpp"
#include "support.hpp"

using namespace patentret;
using testing_support::random_tensor;

namespace {

double gem_scalar(const std::vector<double>& xs, double p) {
  Tensor<double> x(Shape{1, 1, 1, xs.size()}, xs);
  Tensor<double> pt(Shape{1}, p);
  Graph<double> g(false);
  return gem_pool(g.constant(x), g.constant(pt), 1e-6).value()[0];
}

ModelConfig small_config(HeadKind head = HeadKind::arcface) {
  ModelConfig c;
  c.backbone.stage_channels = {8, 16};
  c.backbone.input_size = 16;
  c.embed_dim = 12;
  c.num_classes = 5;
  c.head = head;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// GeM

TEST(Gem, ExponentOneIsAveragePooling) {
  EXPECT_NEAR(gem_scalar({1, 2, 3, 4}, 1.0), 2.5, 1e-6);
}

TEST(Gem, LargeExponentApproachesMax) {
  EXPECT_NEAR(gem_scalar({1, 2, 3, 4}, 1000.0), 4.0, 0.04);
}

TEST(Gem, CubicMeanOracle) {
  // Independent scalar evaluation: ((1 + 8 + 27 + 64) / 4)^(1/3) = 25^(1/3).
  EXPECT_NEAR(gem_scalar({1, 2, 3, 4}, 3.0), std::cbrt(25.0), 1e-6);
  EXPECT_NEAR(gem_scalar({1, 2, 3, 4}, 3.0), 2.9240, 1e-4);
}

TEST(Gem, PropertySuiteOnRandomMaps) {
  Rng rng(2024);
  const std::vector<double> grid{0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 16.0, 64.0};
  for (int t = 0; t < 200; ++t) {
    const std::size_t c = 3, hw = static_cast<std::size_t>(rng.uniform_int(1, 20));
    auto x = random_tensor({1, c, 1, hw}, rng, 0.0, 3.0);
    for (std::size_t i = 0; i < x.size(); i += 5) x[i] = 0.0;  // exact zeros occur after ReLU
    std::vector<double> prev(c, -1.0);
    for (double p : grid) {
      Graph<double> g(false);
      const auto out = gem_pool(g.constant(x), g.constant(Tensor<double>(Shape{c}, p)), 1e-6).value();
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto* v = x.data.data() + ch * hw;
        const double lo = *std::min_element(v, v + hw), hi = *std::max_element(v, v + hw);
        // Power-mean bounds; the 1e-6 floor only matters for all-zero channels.
        EXPECT_GE(out[ch], lo - 1e-9);
        EXPECT_LE(out[ch], std::max(hi, 1e-6) + 1e-9);
        EXPECT_GE(out[ch], prev[ch] - 1e-12) << "not monotone in p at p=" << p;
        prev[ch] = out[ch];
      }
      if (p == 1.0) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double m = 0;
          for (std::size_t i = 0; i < hw; ++i) m += x[ch * hw + i];
          EXPECT_NEAR(out[ch], m / hw, 1e-6);
        }
      }
    }
  }
}

TEST(Gem, NegativeInputRejected) {
  Graph<double> g(false);
  Tensor<double> x(Shape{1, 1, 1, 2}, {1.0, -0.5});
  EXPECT_THROW(gem_pool(g.constant(x), g.constant(Tensor<double>(Shape{1}, 3.0))), std::domain_error);
}

// ---------------------------------------------------------------------------
// Heads

TEST(SoftmaxHead, ClosedFormExamples) {
  auto p = init_params<double>(small_config(HeadKind::softmax), 1);
  // Identity-like W so logits = x for 2 classes.
  ModelConfig c = small_config(HeadKind::softmax);
  c.embed_dim = 2;
  c.num_classes = 2;
  p = init_params<double>(c, 1);
  p.head_weight = Tensor<double>(Shape{2, 2}, {1, 0, 0, 1});
  Graph<double> g(false);
  const std::vector<int> y{0};
  auto loss = softmax_ce_loss(g.constant(Tensor<double>(Shape{1, 2}, {std::log(3.0), 0.0})), y, p);
  EXPECT_NEAR(loss.value().item(), -std::log(0.75), 1e-12);
  EXPECT_NEAR(loss.value().item(), 0.2877, 1e-4);

  // Uniform logits over C classes give ln C.
  c.num_classes = 7;
  auto q = init_params<double>(c, 1);
  q.head_weight = Tensor<double>(Shape{2, 7}, 0.0);
  auto l2 = softmax_ce_loss(g.constant(Tensor<double>(Shape{1, 2}, {0.3, -0.2})), std::vector<int>{4}, q);
  EXPECT_NEAR(l2.value().item(), std::log(7.0), 1e-12);
}

TEST(SoftmaxHead, LabelOutOfRange) {
  auto p = init_params<double>(small_config(HeadKind::softmax), 1);
  Graph<double> g(false);
  EXPECT_THROW(softmax_ce_loss(g.constant(Tensor<double>(Shape{1, 12}, 0.1)), std::vector<int>{5}, p), std::out_of_range);
  EXPECT_THROW(softmax_ce_loss(g.constant(Tensor<double>(Shape{1, 12}, 0.1)), std::vector<int>{-1}, p), std::out_of_range);
}

TEST(ArcfaceHead, DefaultsAreScale20Margin05) {
  ModelConfig c;
  EXPECT_EQ(c.scale, 20.0);
  EXPECT_EQ(c.margin, 0.5);
  EXPECT_EQ(c.embed_dim, 512u);
}

TEST(ArcfaceHead, ZeroMarginUnitScaleClosedForm) {
  ModelConfig c = small_config();
  c.embed_dim = 2;
  c.num_classes = 2;
  c.scale = 1;
  c.margin = 0;
  auto p = init_params<double>(c, 3);
  p.head_weight = Tensor<double>(Shape{2, 2}, {2, 0, 0, 5});  // columns along e1 and e2
  Graph<double> g(false);
  auto loss = arcface_loss(g.constant(Tensor<double>(Shape{1, 2}, {0.7, 0.0})), std::vector<int>{0}, p);
  EXPECT_NEAR(loss.value().item(), -std::log(std::numbers::e / (std::numbers::e + 1)), 1e-12);
  EXPECT_NEAR(loss.value().item(), 0.3133, 1e-4);
}

TEST(ArcfaceHead, ZeroMarginLogitsAreScaledCosines) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    ModelConfig c = small_config();
    c.margin = 0;
    c.scale = rng.uniform(0.5, 40);
    auto p = init_params<double>(c, 100 + t);
    auto x = random_tensor({4, c.embed_dim}, rng);
    std::vector<int> y{0, 1, 2, 3};
    Graph<double> g(false);
    auto cosv = arcface_cosines(g.constant(x), g.constant(p.head_weight));
    auto logits = arcface_logits(g.constant(x), y, p);
    for (std::size_t i = 0; i < logits.value().size(); ++i)
      EXPECT_EQ(logits.value()[i], c.scale * cosv.value()[i]);
    // Loss equals softmax CE over those logits.
    auto ce = cross_entropy(scale(cosv, c.scale), y);
    EXPECT_EQ(arcface_loss(g.constant(x), y, p).value().item(), ce.value().item());
  }
}

TEST(ArcfaceHead, InvariantToPositiveFeatureScaling) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    auto p = init_params<float>(small_config(), 200 + t);
    auto x = random_tensor({6, 12}, rng).cast<float>();
    std::vector<int> y(6);
    for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, 4));
    const float cst = static_cast<float>(std::exp(rng.uniform(-4, 4)));
    auto xs = x;
    for (auto& v : xs.data) v *= cst;
    Graph<float> g(false);
    const float a = arcface_loss(g.constant(x), y, p).value().item();
    const float b = arcface_loss(g.constant(xs), y, p).value().item();
    EXPECT_NEAR(a, b, 1e-5) << "c=" << cst;
  }
}

TEST(ArcfaceHead, NondecreasingInMarginWhenInRange) {
  Rng rng(7);
  int checked = 0;
  while (checked < 100) {
    ModelConfig c = small_config();
    c.embed_dim = 4;
    auto p = init_params<double>(c, 300 + checked);
    auto x = random_tensor({1, 4}, rng);
    std::vector<int> y{static_cast<int>(rng.uniform_int(0, 4))};
    Graph<double> g(false);
    const double cos_y = arcface_cosines(g.constant(x), g.constant(p.head_weight)).value()[static_cast<std::size_t>(y[0])];
    const double theta = std::acos(cos_y);
    double prev = -1;
    bool in_range = false;
    for (double m = 0; theta + m <= std::numbers::pi; m += 0.05) {
      in_range = true;
      p.config.margin = m;
      const double l = arcface_loss(g.constant(x), y, p).value().item();
      EXPECT_GE(l, prev - 1e-12) << "theta=" << theta << " m=" << m;
      prev = l;
    }
    checked += in_range;
  }
}

TEST(ArcfaceHead, HasNoBiasAndRejectsZeroNorm) {
  auto p = init_params<double>(small_config(), 8);
  for (const auto& [name, t] : p.trainable()) EXPECT_NE(name, "head.bias");
  Graph<double> g(false);
  EXPECT_THROW(arcface_loss(g.constant(Tensor<double>(Shape{1, 12}, 0.0)), std::vector<int>{0}, p), std::domain_error);
}

TEST(ModelConfig, InvalidValuesRejected) {
  auto c = small_config();
  c.scale = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.margin = std::numbers::pi;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.margin = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(head_kind_from_string("triplet"), ConfigError);
}

// ---------------------------------------------------------------------------
// Backbone, neck, init

TEST(Backbone, StrideArithmetic) {
  ModelConfig c = small_config();
  c.backbone.stage_channels = {16, 32};
  auto p = init_params<float>(c, 1);
  Graph<float> g(false);
  auto y = backbone_forward(g.constant(Tensor<float>(Shape{2, 1, 64, 64}, 0.5f)), p);
  EXPECT_EQ(y.value().shape, (Shape{2, 32, 16, 16}));
}

TEST(Backbone, ZeroInputZeroOutputAndNonnegative) {
  auto p = init_params<float>(small_config(), 1);
  Graph<float> g(false);
  auto y = backbone_forward(g.constant(Tensor<float>(Shape{2, 1, 16, 16}, 0.0f)), p);
  for (float v : y.value().data) EXPECT_EQ(v, 0.0f);
  Rng rng(1);
  auto z = backbone_forward(g.constant(random_tensor({2, 1, 16, 16}, rng).cast<float>()), p);
  for (float v : z.value().data) EXPECT_GE(v, 0.0f);
}

TEST(Backbone, UnderflowRejected) {
  auto p = init_params<float>(small_config(), 1);
  Graph<float> g(false);
  EXPECT_THROW(backbone_forward(g.constant(Tensor<float>(Shape{1, 1, 3, 3})), p), ShapeError);
  EXPECT_THROW(backbone_forward(g.constant(Tensor<float>(Shape{1, 2, 16, 16})), p), ShapeError);
}

TEST(Neck, IdentityBatchNormInEval) {
  auto p = init_params<float>(small_config(), 2);
  Rng rng(3);
  Graph<float> g(false);
  auto n = neck_forward(g.constant(random_tensor({3, 16}, rng).cast<float>()), p, false);
  const auto& a = n.retrieval_feature.value().data;
  const auto& b = n.head_input.value().data;
  ASSERT_EQ(a.size(), b.size());
  // BN eval with mean 0, var 1, eps 1e-5: x / sqrt(1 + 1e-5).
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i], 1e-5 * (1 + std::abs(a[i])));
}

TEST(Neck, TrainModeBatchMeanIsBeta) {
  auto p = init_params<float>(small_config(), 2);
  Rng rng(4);
  for (auto& v : p.bn_beta.data) v = static_cast<float>(rng.uniform(-1, 1));
  Graph<float> g;
  auto n = neck_forward(g.constant(random_tensor({8, 16}, rng, -3, 3).cast<float>()), p, true);
  const auto& h = n.head_input.value();
  for (std::size_t j = 0; j < 12; ++j) {
    double m = 0;
    for (std::size_t i = 0; i < 8; ++i) m += h[i * 12 + j];
    EXPECT_NEAR(m / 8, p.bn_beta[j], 1e-4);
  }
  EXPECT_THROW(neck_forward(g.constant(Tensor<float>(Shape{1, 16}, 1.0f)), p, true), std::invalid_argument);
}

TEST(Neck, EmbedDim512Shape) {
  ModelConfig c = small_config();
  c.backbone.stage_channels = {64, 128};
  c.embed_dim = 512;
  auto p = init_params<float>(c, 2);
  Graph<float> g(false);
  EXPECT_EQ(neck_forward(g.constant(Tensor<float>(Shape{3, 128}, 0.1f)), p, false).retrieval_feature.value().shape,
            (Shape{3, 512}));
}

TEST(Init, DeterministicAndDocumentedValues) {
  auto a = init_params<float>(small_config(), 11);
  auto b = init_params<float>(small_config(), 11);
  auto ta = a.all_tensors(), tb = b.all_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].second->data, tb[i].second->data) << ta[i].first;
  for (float v : a.gem_p.data) EXPECT_EQ(v, 3.0f);
  for (float v : a.bn_gamma.data) EXPECT_EQ(v, 1.0f);
  for (float v : a.bn_beta.data) EXPECT_EQ(v, 0.0f);
  for (const auto& bias : a.conv_bias)
    for (float v : bias.data) EXPECT_EQ(v, 0.0f);
  const std::size_t d = a.config.embed_dim, c = a.config.num_classes;
  for (std::size_t j = 0; j < c; ++j) {
    double ss = 0;
    for (std::size_t e = 0; e < d; ++e) ss += a.head_weight[e * c + j] * a.head_weight[e * c + j];
    EXPECT_GT(ss, 0.0);
  }
  auto other = init_params<float>(small_config(), 12);
  EXPECT_NE(other.fc_weight.data, a.fc_weight.data);
}

TEST(Pipeline, EveryParameterGetsFiniteGradient) {
  for (HeadKind kind : {HeadKind::softmax, HeadKind::arcface}) {
    auto p = init_params<float>(small_config(kind), 21);
    Rng rng(22);
    for (int t = 0; t < 5; ++t) {
      p.zero_grad();
      auto batch = random_tensor({6, 1, 16, 16}, rng, 0.0, 1.0).cast<float>();
      std::vector<int> y(6);
      for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, 4));
      Graph<float> g;
      auto r = model_forward(g.constant(batch), p, true);
      g.backward(head_loss(r.neck.head_input, y, p));
      for (auto& [name, tensor] : p.trainable()) {
        ASSERT_TRUE(tensor->grad.has_value()) << name;
        for (float v : *tensor->grad) ASSERT_TRUE(std::isfinite(v)) << name;
      }
    }
  }
}
