#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "spa/common.hpp"

namespace spa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (const std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
      : Error("shape mismatch in " + op + ": " + shape_str(lhs) + " vs " +
              shape_str(rhs)) {}
  ShapeError(const std::string& op, const std::string& detail)
      : Error("shape mismatch in " + op + ": " + detail) {}
};

// Dense multi-dimensional array of doubles with an attached gradient slot.
// The universal value type of the autodiff core: parameters, activations and
// losses are all Tensors. grad is zero right after construction and after
// zero_grad(); Graph::backward accumulates into it for requires_grad leaves.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  explicit Tensor(Shape s, bool rg = false)
      : shape(std::move(s)),
        values(numel(shape), 0.0),
        grad(numel(shape), 0.0),
        requires_grad(rg) {}

  std::size_t size() const { return values.size(); }
  bool is_scalar() const { return values.size() == 1; }
  double item() const { return values[0]; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, bool requires_grad = false) {
  return std::make_shared<Tensor>(std::move(s), requires_grad);
}

inline TensorPtr tensor_from(Shape s, std::vector<double> vals,
                             bool requires_grad = false) {
  auto t = std::make_shared<Tensor>(std::move(s), requires_grad);
  if (vals.size() != t->values.size())
    throw ShapeError("tensor_from", t->shape, Shape{vals.size()});
  t->values = std::move(vals);
  return t;
}

inline TensorPtr scalar_tensor(double v) {
  auto t = make_tensor({1});
  t->values[0] = v;
  return t;
}

}  // namespace spa
