#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fanfreq/ops.hpp"
#include "fanfreq/tape.hpp"
#include "fanfreq/tensor.hpp"

namespace fanfreq::nn {

using Rng = std::mt19937_64;

/// Named view of a model parameter.
struct ParamRef {
  std::string name;
  Tensor* tensor;
};

using ParamList = std::vector<ParamRef>;

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), 0.0, true);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.values) v = dist(rng);
  return t;
}

inline Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0, true); }

struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t pad,
         Rng& rng)
      : weight(he_normal({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        bias(zeros({out})),
        stride(stride_),
        padding(pad) {}

  Var operator()(Tape& tape, Var x) {
    return ops::conv2d(x, tape.parameter(weight), tape.parameter(bias), stride, padding);
  }

  void zero_init() {
    std::fill(weight.values.begin(), weight.values.end(), 0.0);
    std::fill(bias.values.begin(), bias.values.end(), 0.0);
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(he_normal({out, in}, in, rng)), bias(zeros({out})) {}

  Var operator()(Tape& tape, Var x) {
    return ops::linear(x, tape.parameter(weight), tape.parameter(bias));
  }

  void zero_init() {
    std::fill(weight.values.begin(), weight.values.end(), 0.0);
    std::fill(bias.values.begin(), bias.values.end(), 0.0);
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

inline void zero_grad(const ParamList& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

/// Enables or disables gradient collection for every parameter in the list.
inline void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) p.tensor->requires_grad = trainable;
}

/// Global L2 norm of all gradients, measured before rescaling them so the
/// norm does not exceed `max_norm` (0 disables the rescale).
inline double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    require_finite(p.tensor->grad, "gradient of " + p.name);
    for (double g : p.tensor->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (const auto& p : params) {
      for (double& g : p.tensor->grad) g *= c;
    }
  }
  return norm;
}

/// Plain SGD: p -= lr * (grad + l2 * p). Parameters without a gradient
/// buffer are left untouched.
inline void sgd_step(const ParamList& params, double lr, double l2 = 0.0) {
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    if (!t.requires_grad || !t.has_grad()) continue;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      t.values[i] -= lr * (t.grad[i] + l2 * t.values[i]);
    }
  }
}

/// Wraps a plane as a 1x1xHxW tensor.
inline Tensor image_tensor(const std::vector<double>& values, std::size_t h, std::size_t w) {
  return Tensor({1, 1, h, w}, values);
}

}  // namespace fanfreq::nn
