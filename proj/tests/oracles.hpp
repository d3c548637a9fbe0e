#pragma once

// Test-only reference computations, independent of the library's code paths.

#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "fanfreq/plane.hpp"

namespace fanfreq::oracle {

/// O(H^2 W^2) double sum of the forward DFT, straight from the definition.
inline std::vector<std::complex<double>> direct_dft2(const RealPlane& x) {
  const std::size_t H = x.height(), W = x.width();
  std::vector<std::complex<double>> out(H * W);
  for (std::size_t u = 0; u < H; ++u) {
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc{};
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
          const double angle = -2.0 * std::numbers::pi *
                               (static_cast<double>(h * u) / static_cast<double>(H) +
                                static_cast<double>(w * v) / static_cast<double>(W));
          acc += x(h, w) * std::polar(1.0, angle);
        }
      }
      out[u * W + v] = acc;
    }
  }
  return out;
}

inline RealPlane random_plane(std::size_t h, std::size_t w, std::uint64_t seed, double lo = -1.0,
                              double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  RealPlane p(h, w);
  for (double& v : p.values()) v = d(rng);
  return p;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo = -1.0,
                                         double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

/// Central finite differences of a scalar function of a flat parameter vector.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double eps = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

/// max |a - b| / max(max |a|, max |b|).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0.0 ? diff : diff / scale;
}

}  // namespace fanfreq::oracle
