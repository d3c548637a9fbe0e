#pragma once

// Differentiable ops over the tape. Image tensors are NCHW, convolution
// weights OIHW; convolution is cross-correlation (the kernel is not flipped).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fanfreq/error.hpp"
#include "fanfreq/fourier.hpp"
#include "fanfreq/tape.hpp"
#include "fanfreq/tensor.hpp"

namespace fanfreq::ops {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw UsageError(std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " +
                     shape_string(b.shape));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw UsageError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape));
  }
}

inline void add_into(std::vector<double>* sink, const std::vector<double>& g, double scale = 1.0) {
  if (sink == nullptr) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += scale * g[i];
}

// Unfolds one NCHW image (c, h, w) into a (c*kh*kw) x (oh*ow) row-major matrix.
inline void im2col(const double* img, std::size_t c, std::size_t h, std::size_t w,
                   std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                   std::size_t oh, std::size_t ow, double* col) {
  const std::size_t p = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = col + ((ch * kh + ki) * kw + kj) * p;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(pad);
          double* dst = row + y * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * stride + kj) - static_cast<long>(pad);
            dst[x] = (ix < 0 || ix >= static_cast<long>(w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back onto the image gradient.
inline void col2im_add(const double* col, std::size_t c, std::size_t h, std::size_t w,
                       std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                       std::size_t oh, std::size_t ow, double* img) {
  const std::size_t p = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = col + ((ch * kh + ki) * kw + kj) * p;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* dst = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          const double* src = row + y * ow;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * stride + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& ta = a.tensor();
  detail::require_same_shape(ta, b.tensor(), "add");
  Tensor out(ta.shape, ta.values);
  const auto& vb = b.values();
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] += vb[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape& t, const std::vector<double>& g) {
                       detail::add_into(t.grad_sink(a), g);
                       detail::add_into(t.grad_sink(b), g);
                     },
                     "add");
}

inline Var sub(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& ta = a.tensor();
  detail::require_same_shape(ta, b.tensor(), "sub");
  Tensor out(ta.shape, ta.values);
  const auto& vb = b.values();
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] -= vb[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape& t, const std::vector<double>& g) {
                       detail::add_into(t.grad_sink(a), g);
                       detail::add_into(t.grad_sink(b), g, -1.0);
                     },
                     "sub");
}

inline Var mul(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& ta = a.tensor();
  detail::require_same_shape(ta, b.tensor(), "mul");
  Tensor out(ta.shape, ta.values);
  const auto& vb = b.values();
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] *= vb[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape& t, const std::vector<double>& g) {
                       const auto& va = t.tensor(a).values;
                       const auto& vb = t.tensor(b).values;
                       if (auto* ga = t.grad_sink(a)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * vb[i];
                       }
                       if (auto* gb = t.grad_sink(b)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * va[i];
                       }
                     },
                     "mul");
}

inline Var scale(Var a, double c) {
  Tensor out(a.shape(), a.values());
  for (double& v : out.values) v *= c;
  return a.tape->record(std::move(out), {a},
                        [a, c](Tape& t, const std::vector<double>& g) {
                          detail::add_into(t.grad_sink(a), g, c);
                        },
                        "scale");
}

/// a + k for a fixed (non-differentiable) tensor k of the same shape.
inline Var add_const(Var a, const std::vector<double>& k) {
  if (k.size() != a.numel()) throw UsageError("add_const: size mismatch");
  Tensor out(a.shape(), a.values());
  for (std::size_t i = 0; i < k.size(); ++i) out.values[i] += k[i];
  return a.tape->record(std::move(out), {a},
                        [a](Tape& t, const std::vector<double>& g) {
                          detail::add_into(t.grad_sink(a), g);
                        },
                        "add_const");
}

/// a * k elementwise for a fixed tensor k.
inline Var mul_const(Var a, std::vector<double> k) {
  if (k.size() != a.numel()) throw UsageError("mul_const: size mismatch");
  Tensor out(a.shape(), a.values());
  for (std::size_t i = 0; i < k.size(); ++i) out.values[i] *= k[i];
  auto saved = std::make_shared<std::vector<double>>(std::move(k));
  return a.tape->record(std::move(out), {a},
                        [a, saved](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*saved)[i];
                          }
                        },
                        "mul_const");
}

/// s * a with s a one-element tensor broadcast over a.
inline Var mul_scalar(Var a, Var s) {
  if (s.numel() != 1) throw UsageError("mul_scalar: scalar operand has shape " + shape_string(s.shape()));
  const double sv = s.item();
  Tensor out(a.shape(), a.values());
  for (double& v : out.values) v *= sv;
  return a.tape->record(std::move(out), {a, s},
                        [a, s](Tape& t, const std::vector<double>& g) {
                          const double sv = t.tensor(s).values[0];
                          detail::add_into(t.grad_sink(a), g, sv);
                          if (auto* gs = t.grad_sink(s)) {
                            const auto& va = t.tensor(a).values;
                            double acc = 0.0;
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * va[i];
                            (*gs)[0] += acc;
                          }
                        },
                        "mul_scalar");
}

/// a + s with s a one-element tensor broadcast over a.
inline Var add_scalar(Var a, Var s) {
  if (s.numel() != 1) throw UsageError("add_scalar: scalar operand has shape " + shape_string(s.shape()));
  const double sv = s.item();
  Tensor out(a.shape(), a.values());
  for (double& v : out.values) v += sv;
  return a.tape->record(std::move(out), {a, s},
                        [a, s](Tape& t, const std::vector<double>& g) {
                          detail::add_into(t.grad_sink(a), g);
                          if (auto* gs = t.grad_sink(s)) {
                            double acc = 0.0;
                            for (double v : g) acc += v;
                            (*gs)[0] += acc;
                          }
                        },
                        "add_scalar");
}

inline Var relu(Var a) {
  Tensor out(a.shape(), a.values());
  for (double& v : out.values) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a},
                        [a](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            const auto& va = t.tensor(a).values;
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (va[i] > 0.0) (*ga)[i] += g[i];
                            }
                          }
                        },
                        "relu");
}

inline Var sigmoid(Var a) {
  Tensor out(a.shape(), a.values());
  for (double& v : out.values) v = 1.0 / (1.0 + std::exp(-v));
  auto y = std::make_shared<std::vector<double>>(out.values);
  return a.tape->record(std::move(out), {a},
                        [a, y](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*ga)[i] += g[i] * (*y)[i] * (1.0 - (*y)[i]);
                            }
                          }
                        },
                        "sigmoid");
}

/// log(1 + a), for a > -1.
inline Var log1p(Var a) {
  Tensor out(a.shape(), a.values());
  for (double& v : out.values) v = std::log1p(v);
  return a.tape->record(std::move(out), {a},
                        [a](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            const auto& va = t.tensor(a).values;
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / (1.0 + va[i]);
                          }
                        },
                        "log1p");
}

/// Identity forward; multiplies the incoming gradient by -1.
inline Var grad_reverse(Var a) {
  Tensor out(a.shape(), a.values());
  return a.tape->record(std::move(out), {a},
                        [a](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] -= g[i];
                          }
                        },
                        "grad_reverse");
}

inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw UsageError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  Tensor out(std::move(shape), a.values());
  return a.tape->record(std::move(out), {a},
                        [a](Tape& t, const std::vector<double>& g) {
                          detail::add_into(t.grad_sink(a), g);
                        },
                        "reshape");
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return a.tape->record(Tensor({1}, {s}), {a},
                        [a](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            for (double& v : *ga) v += g[0];
                          }
                        },
                        "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// (a - mean) / sqrt(var + eps) over all elements, population variance.
inline Var standardize(Var a, double eps = 1e-8) {
  const Tensor& x = a.tensor();
  const std::size_t n = x.numel();
  if (n == 0) throw UsageError("standardize: empty tensor");
  double m = 0.0;
  for (double v : x.values) m += v;
  m /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x.values) var += (v - m) * (v - m);
  var /= static_cast<double>(n);
  const double s = std::sqrt(var + eps);
  Tensor out(x.shape);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = (x.values[i] - m) / s;
  std::vector<double> y = out.values;
  return a.tape->record(std::move(out), {a},
                        [a, y = std::move(y), s, n](Tape& t, const std::vector<double>& g) {
                          auto* ga = t.grad_sink(a);
                          if (!ga) return;
                          double gm = 0.0, gy = 0.0;
                          for (std::size_t i = 0; i < n; ++i) {
                            gm += g[i];
                            gy += g[i] * y[i];
                          }
                          gm /= static_cast<double>(n);
                          gy /= static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (g[i] - gm - y[i] * gy) / s;
                        },
                        "standardize");
}

/// NCHW -> NC, per-channel spatial mean.
inline Var global_avg_pool(Var a) {
  const Tensor& x = a.tensor();
  detail::require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw UsageError("global_avg_pool: empty spatial extent");
  Tensor out({x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += x.values[i * hw + j];
    out.values[i] = s / static_cast<double>(hw);
  }
  return a.tape->record(std::move(out), {a},
                        [a, nc, hw](Tape& t, const std::vector<double>& g) {
                          if (auto* ga = t.grad_sink(a)) {
                            const double inv = 1.0 / static_cast<double>(hw);
                            for (std::size_t i = 0; i < nc; ++i) {
                              for (std::size_t j = 0; j < hw; ++j) (*ga)[i * hw + j] += g[i] * inv;
                            }
                          }
                        },
                        "global_avg_pool");
}

// ---------------------------------------------------------------------------
// Layers

/// 2D cross-correlation. input [N,C,H,W], weight [O,C,KH,KW], bias [O].
inline Var conv2d(Var input, Var weight, Var bias, std::size_t stride = 1, std::size_t padding = 0) {
  const Tensor& x = input.tensor();
  const Tensor& w = weight.tensor();
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "weight");
  if (stride == 0) throw UsageError("conv2d: stride must be positive");
  if (x.dim(1) != w.dim(1)) {
    throw UsageError("conv2d: input " + shape_string(x.shape) + " has " + std::to_string(x.dim(1)) +
                     " channels but weight " + shape_string(w.shape) + " expects " +
                     std::to_string(w.dim(1)));
  }
  if (bias.numel() != w.dim(0)) {
    throw UsageError("conv2d: bias " + shape_string(bias.shape()) + " does not match weight " +
                     shape_string(w.shape));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h + 2 * padding < kh || wd + 2 * padding < kw) {
    throw UsageError("conv2d: kernel " + shape_string(w.shape) + " larger than padded input " +
                     shape_string(x.shape));
  }
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - kw) / stride + 1;
  const std::size_t k = c * kh * kw;
  const std::size_t p = oh * ow;

  auto cols = std::make_shared<std::vector<double>>(n * k * p);
  Tensor out({n, o, oh, ow});
  const detail::ConstMatrixMap wm(w.values.data(), static_cast<Eigen::Index>(o),
                                  static_cast<Eigen::Index>(k));
  const Eigen::Map<const Eigen::VectorXd> bv(bias.values().data(), static_cast<Eigen::Index>(o));
  for (std::size_t b = 0; b < n; ++b) {
    double* col = cols->data() + b * k * p;
    detail::im2col(x.values.data() + b * c * h * wd, c, h, wd, kh, kw, stride, padding, oh, ow, col);
    detail::MatrixMap om(out.values.data() + b * o * p, static_cast<Eigen::Index>(o),
                         static_cast<Eigen::Index>(p));
    om.noalias() = wm * detail::ConstMatrixMap(col, static_cast<Eigen::Index>(k),
                                               static_cast<Eigen::Index>(p));
    om.colwise() += bv;
  }

  return input.tape->record(
      std::move(out), {input, weight, bias},
      [=](Tape& t, const std::vector<double>& g) {
        const auto K = static_cast<Eigen::Index>(k);
        const auto P = static_cast<Eigen::Index>(p);
        const auto O = static_cast<Eigen::Index>(o);
        auto* gx = t.grad_sink(input);
        auto* gw = t.grad_sink(weight);
        auto* gb = t.grad_sink(bias);
        const detail::ConstMatrixMap wm(t.tensor(weight).values.data(), O, K);
        std::vector<double> dcol(gx ? k * p : 0);
        for (std::size_t b = 0; b < n; ++b) {
          const detail::ConstMatrixMap gm(g.data() + b * o * p, O, P);
          const detail::ConstMatrixMap cm(cols->data() + b * k * p, K, P);
          if (gw) {
            detail::MatrixMap(gw->data(), O, K).noalias() += gm * cm.transpose();
          }
          if (gb) {
            // Plain loop keeps the summation order independent of alignment.
            const double* gp = g.data() + b * o * p;
            for (std::size_t oc = 0; oc < o; ++oc) {
              double s = 0.0;
              for (std::size_t i = 0; i < p; ++i) s += gp[oc * p + i];
              (*gb)[oc] += s;
            }
          }
          if (gx) {
            detail::MatrixMap dm(dcol.data(), K, P);
            dm.noalias() = wm.transpose() * gm;
            detail::col2im_add(dcol.data(), c, h, wd, kh, kw, stride, padding, oh, ow,
                               gx->data() + b * c * h * wd);
          }
        }
      },
      "conv2d");
}

/// Fully connected: input [N,In], weight [Out,In], bias [Out] -> [N,Out].
inline Var linear(Var input, Var weight, Var bias) {
  const Tensor& x = input.tensor();
  const Tensor& w = weight.tensor();
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(w, 2, "linear", "weight");
  if (x.dim(1) != w.dim(1) || bias.numel() != w.dim(0)) {
    throw UsageError("linear: input " + shape_string(x.shape) + " incompatible with weight " +
                     shape_string(w.shape) + " / bias " + shape_string(bias.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), outf = w.dim(0);
  Tensor out({n, outf});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < outf; ++j) {
      double s = bias.values()[j];
      for (std::size_t i = 0; i < in; ++i) s += w.values[j * in + i] * x.values[b * in + i];
      out.values[b * outf + j] = s;
    }
  }
  return input.tape->record(
      std::move(out), {input, weight, bias},
      [=](Tape& t, const std::vector<double>& g) {
        const auto& xv = t.tensor(input).values;
        const auto& wv = t.tensor(weight).values;
        auto* gx = t.grad_sink(input);
        auto* gw = t.grad_sink(weight);
        auto* gb = t.grad_sink(bias);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t j = 0; j < outf; ++j) {
            const double gj = g[b * outf + j];
            if (gb) (*gb)[j] += gj;
            for (std::size_t i = 0; i < in; ++i) {
              if (gw) (*gw)[j * in + i] += gj * xv[b * in + i];
              if (gx) (*gx)[b * in + i] += gj * wv[j * in + i];
            }
          }
        }
      },
      "linear");
}

/// 2x2 max pooling with stride 2; H and W must be even. Ties go to the first
/// element in row-major window order.
inline Var max_pool2d(Var input) {
  const Tensor& x = input.tensor();
  detail::require_rank(x, 4, "max_pool2d", "input");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw UsageError("max_pool2d: spatial dims must be even, got " + shape_string(x.shape));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (std::size_t i = 0; i < nc; ++i) {
    const double* plane = x.values.data() + i * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t z = 0; z < ow; ++z) {
        std::size_t best = (2 * y) * w + 2 * z;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dz = 0; dz < 2; ++dz) {
            const std::size_t idx = (2 * y + dy) * w + 2 * z + dz;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        const std::size_t o = (i * oh + y) * ow + z;
        out.values[o] = plane[best];
        (*argmax)[o] = i * h * w + best;
      }
    }
  }
  return input.tape->record(std::move(out), {input},
                            [input, argmax](Tape& t, const std::vector<double>& g) {
                              if (auto* gx = t.grad_sink(input)) {
                                for (std::size_t o = 0; o < g.size(); ++o) (*gx)[(*argmax)[o]] += g[o];
                              }
                            },
                            "max_pool2d");
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2x(Var input) {
  const Tensor& x = input.tensor();
  detail::require_rank(x, 4, "upsample2x", "input");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t i = 0; i < nc; ++i) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t z = 0; z < 2 * w; ++z) {
        out.values[(i * 2 * h + y) * 2 * w + z] = x.values[(i * h + y / 2) * w + z / 2];
      }
    }
  }
  return input.tape->record(std::move(out), {input},
                            [input, nc, h, w](Tape& t, const std::vector<double>& g) {
                              if (auto* gx = t.grad_sink(input)) {
                                for (std::size_t i = 0; i < nc; ++i) {
                                  for (std::size_t y = 0; y < 2 * h; ++y) {
                                    for (std::size_t z = 0; z < 2 * w; ++z) {
                                      (*gx)[(i * h + y / 2) * w + z / 2] +=
                                          g[(i * 2 * h + y) * 2 * w + z];
                                    }
                                  }
                                }
                              }
                            },
                            "upsample2x");
}

/// Concatenates two NCHW tensors along the channel axis.
inline Var concat_channels(Var a, Var b) {
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  detail::require_rank(ta, 4, "concat_channels", "first input");
  detail::require_rank(tb, 4, "concat_channels", "second input");
  if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) || ta.dim(3) != tb.dim(3)) {
    throw UsageError("concat_channels: " + shape_string(ta.shape) + " vs " + shape_string(tb.shape));
  }
  const std::size_t n = ta.dim(0), ca = ta.dim(1), cb = tb.dim(1), hw = ta.dim(2) * ta.dim(3);
  Tensor out({n, ca + cb, ta.dim(2), ta.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(ta.values.data() + i * ca * hw, ca * hw, out.values.data() + i * (ca + cb) * hw);
    std::copy_n(tb.values.data() + i * cb * hw, cb * hw,
                out.values.data() + (i * (ca + cb) + ca) * hw);
  }
  return a.tape->record(std::move(out), {a, b},
                        [=](Tape& t, const std::vector<double>& g) {
                          auto* ga = t.grad_sink(a);
                          auto* gb = t.grad_sink(b);
                          for (std::size_t i = 0; i < n; ++i) {
                            const double* src = g.data() + i * (ca + cb) * hw;
                            if (ga) {
                              for (std::size_t j = 0; j < ca * hw; ++j) (*ga)[i * ca * hw + j] += src[j];
                            }
                            if (gb) {
                              for (std::size_t j = 0; j < cb * hw; ++j) {
                                (*gb)[i * cb * hw + j] += src[ca * hw + j];
                              }
                            }
                          }
                        },
                        "concat_channels");
}

/// Moves DC to the centre of each of the trailing H x W planes.
inline Var fftshift(Var input) {
  const Tensor& x = input.tensor();
  if (x.rank() < 2) throw UsageError("fftshift: rank must be at least 2, got " + shape_string(x.shape));
  const std::size_t h = x.shape[x.rank() - 2], w = x.shape[x.rank() - 1];
  const std::size_t planes = x.numel() / (h * w);
  auto perm = std::make_shared<std::vector<std::size_t>>(x.numel());
  Tensor out(x.shape);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t src = (p * h + r) * w + c;
        const std::size_t dst = (p * h + (r + h / 2) % h) * w + (c + w / 2) % w;
        out.values[dst] = x.values[src];
        (*perm)[dst] = src;
      }
    }
  }
  return input.tape->record(std::move(out), {input},
                            [input, perm](Tape& t, const std::vector<double>& g) {
                              if (auto* gx = t.grad_sink(input)) {
                                for (std::size_t d = 0; d < g.size(); ++d) (*gx)[(*perm)[d]] += g[d];
                              }
                            },
                            "fftshift");
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of -log softmax(logits)[label]. logits [N,K]; labels are
/// 1-based class indices.
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& z = logits.tensor();
  detail::require_rank(z, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (k < 2) throw UsageError("softmax_cross_entropy: need at least 2 classes");
  if (labels.size() != n) {
    throw UsageError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (int label : labels) {
    if (label < 1 || static_cast<std::size_t>(label) > k) {
      throw UsageError("softmax_cross_entropy: label " + std::to_string(label) +
                       " outside 1.." + std::to_string(k));
    }
  }
  auto probs = std::make_shared<std::vector<double>>(n * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = z.values.data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double log_z = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - log_z);
    loss -= row[labels[r] - 1] - log_z;
  }
  loss /= static_cast<double>(n);
  return logits.tape->record(Tensor({1}, {loss}), {logits},
                             [logits, probs, labels, n, k](Tape& t, const std::vector<double>& g) {
                               if (auto* gz = t.grad_sink(logits)) {
                                 const double s = g[0] / static_cast<double>(n);
                                 for (std::size_t r = 0; r < n; ++r) {
                                   for (std::size_t j = 0; j < k; ++j) {
                                     const double onehot = static_cast<int>(j) + 1 == labels[r] ? 1.0 : 0.0;
                                     (*gz)[r * k + j] += s * ((*probs)[r * k + j] - onehot);
                                   }
                                 }
                               }
                             },
                             "softmax_cross_entropy");
}

/// Additive smoothing of the soft Dice ratio.
inline constexpr double kDiceSmoothing = 1.0;

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) with eps = 1; target must be 0/1.
inline Var soft_dice_loss(Var pred, const std::vector<double>& target) {
  if (target.size() != pred.numel()) {
    throw UsageError("soft_dice_loss: prediction " + shape_string(pred.shape()) + " has " +
                     std::to_string(pred.numel()) + " entries, target " +
                     std::to_string(target.size()));
  }
  for (double v : target) {
    if (v != 0.0 && v != 1.0) {
      throw UsageError("soft_dice_loss: target entries must be 0 or 1, found " + std::to_string(v));
    }
  }
  const auto& p = pred.values();
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * target[i];
    sp += p[i];
    st += target[i];
  }
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = sp + st + kDiceSmoothing;
  auto saved = std::make_shared<std::vector<double>>(target);
  return pred.tape->record(Tensor({1}, {1.0 - num / den}), {pred},
                           [pred, saved, num, den](Tape& t, const std::vector<double>& g) {
                             if (auto* gp = t.grad_sink(pred)) {
                               const double d2 = den * den;
                               for (std::size_t i = 0; i < saved->size(); ++i) {
                                 (*gp)[i] -= g[0] * (2.0 * (*saved)[i] * den - num) / d2;
                               }
                             }
                           },
                           "soft_dice_loss");
}

// ---------------------------------------------------------------------------
// Spectrum synthesis

/// x = Re idft2(amplitude * exp(j phase)) for a fixed phase plane. amplitude is
/// any tensor whose trailing dims are H x W with a single plane. Because the
/// map is linear in the amplitude, its adjoint is
///   dA = Re(exp(-j phase) * dft2(dx)) / (H W).
inline Var spectrum_recombine(Var amplitude, const RealPlane& phase) {
  const Tensor& a = amplitude.tensor();
  const std::size_t h = phase.height(), w = phase.width();
  if (a.numel() != h * w || a.rank() < 2 || a.shape[a.rank() - 2] != h || a.shape[a.rank() - 1] != w) {
    throw UsageError("spectrum_recombine: amplitude " + shape_string(a.shape) +
                     " does not match phase " + dims_string(h, w));
  }
  const RealPlane amp(h, w, a.values);
  RealPlane image = idft2(recombine(amp, phase));
  auto ph = std::make_shared<RealPlane>(phase);
  return amplitude.tape->record(
      Tensor(a.shape, std::move(image).take()), {amplitude},
      [amplitude, ph](Tape& t, const std::vector<double>& g) {
        auto* ga = t.grad_sink(amplitude);
        if (!ga) return;
        const std::size_t h = ph->height(), w = ph->width();
        const ComplexPlane G = dft2(RealPlane(h, w, g));
        const double inv = 1.0 / static_cast<double>(h * w);
        for (std::size_t i = 0; i < G.size(); ++i) {
          const double c = std::cos((*ph)[i]), s = std::sin((*ph)[i]);
          // Re((c - j s)(Gr + j Gi)) = c Gr + s Gi
          (*ga)[i] += (c * G[i].real() + s * G[i].imag()) * inv;
        }
      },
      "spectrum_recombine");
}

}  // namespace fanfreq::ops
