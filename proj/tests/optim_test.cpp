#include <cmath>

#include <gtest/gtest.h>

#include "patentret/optim.hpp"
#include "support.hpp"

using namespace patentret;
using testing_support::random_tensor;

namespace {

Tensor<double> with_grad(Tensor<double> t, std::vector<double> g) {
  t.requires_grad = true;
  t.grad = std::move(g);
  return t;
}

}  // namespace

TEST(AdamW, ZeroGradientNoDecayLeavesParameters) {
  auto t = with_grad(Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}), {0, 0, 0});
  const auto before = t.data;
  OptimizerState<double> st;
  for (int i = 0; i < 5; ++i) adamw_step<double>({{"w", &t}}, st, 1e-3, 0.0);
  EXPECT_EQ(t.data, before);
  EXPECT_EQ(st.step, 5);
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
  Rng rng(1);
  auto t = random_tensor({50}, rng);
  std::vector<double> g(50);
  for (auto& v : g) v = rng.uniform(-3, 3);
  t = with_grad(t, g);
  const auto before = t.data;
  OptimizerState<double> st;
  adamw_step<double>({{"w", &t}}, st, 1e-3, 0.0);
  for (std::size_t i = 0; i < 50; ++i)
    EXPECT_NEAR(t[i] - before[i], -1e-3 * (g[i] > 0 ? 1 : -1), 1e-9);
}

TEST(AdamW, DecoupledDecayScalesParameters) {
  auto t = with_grad(Tensor<double>(Shape{2}, {4.0, -8.0}), {0, 0});
  OptimizerState<double> st;
  adamw_step<double>({{"w", &t}}, st, 1e-3, 5e-4);
  EXPECT_DOUBLE_EQ(t[0], 4.0 * (1 - 5e-7));
  EXPECT_DOUBLE_EQ(t[1], -8.0 * (1 - 5e-7));
}

TEST(AdamW, MatchesReferenceRecurrence) {
  Rng rng(2);
  auto t = random_tensor({7}, rng);
  OptimizerState<double> st;
  std::vector<double> ref = t.data, m(7, 0), v(7, 0);
  const double lr = 3e-3, wd = 1e-2;
  for (int step = 1; step <= 25; ++step) {
    std::vector<double> g(7);
    for (auto& x : g) x = rng.uniform(-1, 1);
    t.grad = g;
    adamw_step<double>({{"w", &t}}, st, lr, wd);
    for (std::size_t i = 0; i < 7; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      ref[i] = ref[i] - lr * mh / (std::sqrt(vh) + 1e-8) - lr * wd * ref[i];
    }
  }
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(t[i], ref[i], 1e-12);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto a = with_grad(Tensor<double>(Shape{2}, {1, 2}), {0.1, 0.2});
  auto b = with_grad(Tensor<double>(Shape{2}, {3, 4}), {0.1, std::nan("")});
  OptimizerState<double> st;
  try {
    adamw_step<double>({{"first", &a}, {"second.weight", &b}}, st, 1e-3, 0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("second.weight"), std::string::npos);
  }
  EXPECT_EQ(a.data, (std::vector<double>{1, 2}));
  EXPECT_EQ(st.step, 0);
}

TEST(AdamW, GemExponentClampedAfterStep) {
  ModelConfig c;
  c.backbone.stage_channels = {4, 8};
  c.embed_dim = 4;
  c.num_classes = 3;
  auto p = init_params<float>(c, 1);
  for (auto& [name, t] : p.trainable()) t->grad = std::vector<float>(t->size(), 0.0f);
  p.gem_p.data.assign(8, 0.0501f);
  p.gem_p.grad = std::vector<float>(8, 100.0f);  // pushes p down by lr per step
  OptimizerState<float> st;
  for (int i = 0; i < 3; ++i) adamw_step(p, st, 0.01, 0.0);
  for (float v : p.gem_p.data) EXPECT_EQ(v, static_cast<float>(kGemMinExponent));
}

// One step moves each coordinate by at most lr * (1 + wd * |theta|): the
// normalized Adam direction is bounded by 1 after bias correction at t = 1.
TEST(AdamW, StepSizeBound) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    auto x = random_tensor({20}, rng, -5, 5);
    std::vector<double> g(20);
    for (auto& v : g) v = rng.uniform(-10, 10);
    x = with_grad(x, g);
    const auto before = x.data;
    OptimizerState<double> st;
    adamw_step<double>({{"w", &x}}, st, 1e-3, 5e-4);
    for (std::size_t i = 0; i < 20; ++i)
      EXPECT_LE(std::abs(x[i] - before[i]), 1e-3 * (1 + 5e-4 * std::abs(before[i])) + 1e-15);
  }
}

TEST(AdamW, MomentShapeMismatchRejected) {
  auto t = with_grad(Tensor<double>(Shape{2}, {1, 2}), {0, 0});
  OptimizerState<double> st;
  st.m["w"] = {0, 0, 0};
  st.v["w"] = {0, 0, 0};
  EXPECT_THROW(adamw_step<double>({{"w", &t}}, st, 1e-3, 0), ShapeError);
}
