#pragma once

// Dense row-major tensors. Scalar type is a template parameter so the same
// kernels can be instantiated in float (training) and double (gradient checks).

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace patentret {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {
    validate();
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    validate();
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
    return data[0];
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T{0});
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

 private:
  void validate() const {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("zero-sized dimension in shape " + to_string(shape));
    if (numel(shape) != data.size())
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
  }
};

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     to_string(s));
}

}  // namespace patentret
