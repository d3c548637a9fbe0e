#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fanfreq/error.hpp"

namespace fanfreq {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << "]";
  return out.str();
}

/// Real N-dimensional array with an optional gradient buffer of the same shape.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  ///< empty until a gradient is accumulated

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0, bool needs_grad = false)
      : shape(std::move(s)), values(fanfreq::numel(shape), fill), requires_grad(needs_grad) {}
  Tensor(Shape s, std::vector<double> v, bool needs_grad = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad) {
    if (values.size() != fanfreq::numel(shape)) {
      throw UsageError("tensor of shape " + shape_string(shape) + " given " +
                       std::to_string(values.size()) + " values");
    }
  }

  std::size_t numel() const noexcept { return values.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const noexcept { return shape.size(); }

  bool has_grad() const noexcept { return !grad.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  double item() const {
    if (values.size() != 1) {
      throw UsageError("item() on tensor of shape " + shape_string(shape));
    }
    return values[0];
  }
};

inline void require_finite(const std::vector<double>& v, const std::string& what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericalError(what + ": non-finite value " + std::to_string(v[i]) + " at index " +
                           std::to_string(i));
    }
  }
}

}  // namespace fanfreq
