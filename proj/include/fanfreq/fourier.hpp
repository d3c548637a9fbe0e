#pragma once

// 2D discrete Fourier analysis and synthesis, amplitude/phase decomposition,
// centered low-frequency masks and the non-learned amplitude swap.
//
// Normalization: the forward transform is unnormalized,
//   F(u,v) = sum_{h,w} x(h,w) exp(-j 2 pi (h u / H + w v / W)),
// and the inverse carries the full 1/(H W) factor. Gradient formulas in
// autodiff.hpp rely on this convention.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <sstream>
#include <vector>

#include "fanfreq/error.hpp"
#include "fanfreq/plane.hpp"

namespace fanfreq {

using Complex = std::complex<double>;
using ComplexPlane = Plane<Complex>;

/// Amplitude (non-negative) and phase (in (-pi, pi]) planes of a spectrum.
struct AmpPhase {
  RealPlane amplitude;
  RealPlane phase;
};

/// Centered low-frequency mask: bins within +-floor(alpha*H), +-floor(alpha*W)
/// of DC, bounds inclusive.
struct MaskSpec {
  double alpha = 0.1;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Largest imaginary residue idft2 tolerates before declaring the input
/// spectrum non-Hermitian.
inline constexpr double kImagResidueLimit = 1e-6;

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, in place, forward sign (-j).
inline void fft_radix2(std::vector<Complex>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  std::vector<Complex> twiddle(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    twiddle[k] = Complex(std::cos(angle), std::sin(angle));
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const Complex t = twiddle[k * step] * a[start + k + half];
        a[start + k + half] = a[start + k] - t;
        a[start + k] += t;
      }
    }
  }
}

// Direct O(n^2) DFT for lengths that are not powers of two.
inline void dft_direct(std::vector<Complex>& a) {
  const std::size_t n = a.size();
  std::vector<Complex> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    Complex acc{};
    for (std::size_t t = 0; t < n; ++t) {
      // (k*t) mod n keeps the angle small and exact in integer arithmetic.
      const double angle =
          -2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      acc += a[t] * Complex(std::cos(angle), std::sin(angle));
    }
    out[k] = acc;
  }
  a.swap(out);
}

inline void transform_1d(std::vector<Complex>& a) {
  if (is_power_of_two(a.size())) {
    fft_radix2(a);
  } else {
    dft_direct(a);
  }
}

// Separable forward transform: rows, then columns.
inline void forward_inplace(ComplexPlane& s) {
  const std::size_t h = s.height();
  const std::size_t w = s.width();
  std::vector<Complex> line(w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) line[c] = s(r, c);
    transform_1d(line);
    for (std::size_t c = 0; c < w; ++c) s(r, c) = line[c];
  }
  line.resize(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) line[r] = s(r, c);
    transform_1d(line);
    for (std::size_t r = 0; r < h; ++r) s(r, c) = line[r];
  }
}

inline void require_min_dims(std::size_t h, std::size_t w, const char* what) {
  if (h < 2 || w < 2) {
    throw UsageError(std::string(what) + ": dimensions must be at least 2x2, got " +
                     dims_string(h, w));
  }
}

}  // namespace detail

/// Unnormalized forward 2D DFT of a real image. Power-of-two axes use radix-2,
/// other lengths fall back to the direct sum.
inline ComplexPlane dft2(const RealPlane& image) {
  detail::require_min_dims(image.height(), image.width(), "dft2");
  require_finite(image, "dft2");
  ComplexPlane s(image.height(), image.width());
  for (std::size_t i = 0; i < image.size(); ++i) s[i] = Complex(image[i], 0.0);
  detail::forward_inplace(s);
  return s;
}

/// Forward transform of a complex plane (no finiteness check).
inline ComplexPlane dft2(const ComplexPlane& plane) {
  detail::require_min_dims(plane.height(), plane.width(), "dft2");
  ComplexPlane s = plane;
  detail::forward_inplace(s);
  return s;
}

struct InverseResult {
  RealPlane image;
  double imag_residue = 0.0;  ///< max |imag| of the discarded part
};

/// Inverse 2D DFT with 1/(HW) normalization; keeps the real part and reports
/// the largest discarded imaginary magnitude.
inline InverseResult idft2_with_residue(const ComplexPlane& spectrum) {
  detail::require_min_dims(spectrum.height(), spectrum.width(), "idft2");
  // conj(F(conj(X))) / N
  ComplexPlane s(spectrum.height(), spectrum.width());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::conj(spectrum[i]);
  detail::forward_inplace(s);
  const double scale = 1.0 / static_cast<double>(s.size());
  InverseResult out{RealPlane(s.height(), s.width()), 0.0};
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.image[i] = s[i].real() * scale;
    out.imag_residue = std::max(out.imag_residue, std::abs(-s[i].imag() * scale));
  }
  return out;
}

/// Inverse transform that rejects spectra whose imaginary residue exceeds
/// kImagResidueLimit (a Hermitian-symmetry violation upstream).
inline RealPlane idft2(const ComplexPlane& spectrum) {
  InverseResult r = idft2_with_residue(spectrum);
  if (!(r.imag_residue < kImagResidueLimit)) {
    std::ostringstream msg;
    msg << "idft2: imaginary residue " << r.imag_residue << " exceeds " << kImagResidueLimit
        << " (spectrum is not conjugate-symmetric)";
    throw NumericalError(msg.str());
  }
  return std::move(r.image);
}

/// Phase of a single bin: atan2 with zero bins mapped to 0 and -pi folded to pi.
inline double bin_phase(Complex z) {
  if (z.real() == 0.0 && z.imag() == 0.0) return 0.0;
  const double p = std::atan2(z.imag(), z.real());
  return p == -std::numbers::pi ? std::numbers::pi : p;
}

inline AmpPhase decompose(const ComplexPlane& spectrum) {
  AmpPhase ap{RealPlane(spectrum.height(), spectrum.width()),
              RealPlane(spectrum.height(), spectrum.width())};
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    ap.amplitude[i] = std::hypot(spectrum[i].real(), spectrum[i].imag());
    ap.phase[i] = bin_phase(spectrum[i]);
  }
  return ap;
}

inline ComplexPlane recombine(const RealPlane& amplitude, const RealPlane& phase) {
  require_same_dims(amplitude, phase, "recombine");
  ComplexPlane s(amplitude.height(), amplitude.width());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double a = amplitude[i];
    if (!(a >= 0.0)) {
      std::ostringstream msg;
      msg << "recombine: negative amplitude " << a << " at index " << i;
      throw UsageError(msg.str());
    }
    s[i] = a == 0.0 ? Complex{} : Complex(a * std::cos(phase[i]), a * std::sin(phase[i]));
  }
  return s;
}

inline ComplexPlane recombine(const AmpPhase& ap) { return recombine(ap.amplitude, ap.phase); }

inline void validate(const MaskSpec& spec) {
  if (!(spec.alpha > 0.0 && spec.alpha < 0.5)) {
    std::ostringstream msg;
    msg << "mask alpha must lie in (0, 0.5), got " << spec.alpha;
    throw UsageError(msg.str());
  }
  detail::require_min_dims(spec.height, spec.width, "build_mask");
}

/// Half-widths floor(alpha*H), floor(alpha*W) of the mask.
inline std::pair<std::size_t, std::size_t> mask_radius(const MaskSpec& spec) {
  validate(spec);
  return {static_cast<std::size_t>(std::floor(spec.alpha * static_cast<double>(spec.height))),
          static_cast<std::size_t>(std::floor(spec.alpha * static_cast<double>(spec.width)))};
}

/// Signed centered frequency of index i on an axis of length n.
inline long centered_index(std::size_t i, std::size_t n) {
  const auto half = static_cast<long>(n / 2);
  return static_cast<long>((i + n / 2) % n) - half;
}

/// Binary 0/1 mask in unshifted spectrum indexing, ready to multiply dft2 output.
inline RealPlane build_mask(const MaskSpec& spec) {
  const auto [rh, rw] = mask_radius(spec);
  RealPlane mask(spec.height, spec.width, 0.0);
  for (std::size_t h = 0; h < spec.height; ++h) {
    const long ch = centered_index(h, spec.height);
    // alpha < 0.5 keeps the radius below H/2, so the Nyquist row never enters.
    if (std::labs(ch) > static_cast<long>(rh)) continue;
    for (std::size_t w = 0; w < spec.width; ++w) {
      const long cw = centered_index(w, spec.width);
      if (std::labs(cw) <= static_cast<long>(rw)) mask(h, w) = 1.0;
    }
  }
  return mask;
}

/// Moves DC to (H/2, W/2).
template <class T>
Plane<T> fftshift(const Plane<T>& in) {
  Plane<T> out(in.height(), in.width());
  const std::size_t sh = in.height() / 2;
  const std::size_t sw = in.width() / 2;
  for (std::size_t h = 0; h < in.height(); ++h) {
    for (std::size_t w = 0; w < in.width(); ++w) {
      out((h + sh) % in.height(), (w + sw) % in.width()) = in(h, w);
    }
  }
  return out;
}

/// Replaces the low-frequency amplitude of `target` with that of `source`,
/// keeping the target phase.
inline RealPlane amplitude_swap(const RealPlane& target, const RealPlane& source, double alpha) {
  require_same_dims(target, source, "amplitude_swap");
  const RealPlane mask = build_mask({alpha, target.height(), target.width()});
  AmpPhase t = decompose(dft2(target));
  const AmpPhase s = decompose(dft2(source));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    t.amplitude[i] = mask[i] * s.amplitude[i] + (1.0 - mask[i]) * t.amplitude[i];
  }
  return idft2(recombine(t));
}

/// Mean amplitude over the bins selected by `mask`.
inline double mean_masked(const RealPlane& plane, const RealPlane& mask) {
  require_same_dims(plane, mask, "mean_masked");
  double sum = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < plane.size(); ++i) {
    if (mask[i] != 0.0) {
      sum += plane[i];
      count += 1.0;
    }
  }
  return count > 0.0 ? sum / count : 0.0;
}

}  // namespace fanfreq
