#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "patentret/graph.hpp"
#include "patentret/ops.hpp"
#include "patentret/rng.hpp"

namespace testing_support {

using patentret::Graph;
using patentret::Rng;
using patentret::Shape;
using patentret::Tensor;
using patentret::Var;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// Builds a scalar loss; binds whatever tensors it needs with g.param().
using LossFn = std::function<Var<double>(Graph<double>&)>;

inline double evaluate(const LossFn& loss) {
  Graph<double> g(false);
  return loss(g).value().item();
}

/// Worst relative error between analytic gradients and central differences,
/// measured per tensor as max|a - n| / max(max|n|, 1e-8). `wrt` are the
/// tensors `loss` binds that should be checked.
inline double grad_check(const std::vector<Tensor<double>*>& wrt, const LossFn& loss, double eps = 1e-4) {
  for (auto* t : wrt) {
    t->requires_grad = true;
    t->grad.reset();
  }
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  double worst = 0;
  for (auto* t : wrt) {
    const std::vector<double> analytic = t->grad ? *t->grad : std::vector<double>(t->size(), 0.0);
    double diff = 0, scale = 1e-8;
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double saved = (*t)[i];
      (*t)[i] = saved + eps;
      const double up = evaluate(loss);
      (*t)[i] = saved - eps;
      const double down = evaluate(loss);
      (*t)[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      diff = std::max(diff, std::abs(analytic[i] - numeric));
      scale = std::max(scale, std::abs(numeric));
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

/// Convenience form: every input tensor is bound in order and checked.
inline double grad_check(std::vector<Tensor<double>>& inputs,
                         const std::function<Var<double>(Graph<double>&, std::vector<Var<double>>&)>& build,
                         double eps = 1e-4) {
  std::vector<Tensor<double>*> wrt;
  for (auto& t : inputs) wrt.push_back(&t);
  return grad_check(
      wrt,
      [&](Graph<double>& g) {
        std::vector<Var<double>> vars;
        for (auto& t : inputs) vars.push_back(g.param(t));
        return build(g, vars);
      },
      eps);
}

/// Reduces an output to sum(w * y) with a random signed w drawn on first
/// use and reused afterwards, so every output element matters.
class Projection {
 public:
  explicit Projection(std::uint64_t seed) : rng_(seed) {}

  Var<double> operator()(Var<double> y) {
    if (!w_ || w_->shape != y.shape()) {
      w_ = random_tensor(y.shape(), rng_, 0.5, 1.5);
      for (std::size_t i = 0; i < w_->size(); i += 2) (*w_)[i] = -(*w_)[i];
    }
    return patentret::sum(patentret::mul(y, y.graph->constant(*w_)));
  }

 private:
  Rng rng_;
  std::optional<Tensor<double>> w_;
};

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("patentret_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace testing_support
