#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fanfreq/error.hpp"

namespace fanfreq {

/// Dense row-major H x W plane.
template <class T>
class Plane {
 public:
  using value_type = T;

  Plane() = default;
  Plane(std::size_t height, std::size_t width, T fill = T{})
      : height_(height), width_(width), data_(height * width, fill) {}
  Plane(std::size_t height, std::size_t width, std::vector<T> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != height_ * width_) {
      std::ostringstream msg;
      msg << "plane data length " << data_.size() << " does not match " << height_ << "x"
          << width_;
      throw UsageError(msg.str());
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t h, std::size_t w) { return data_[h * width_ + w]; }
  const T& operator()(std::size_t h, std::size_t w) const { return data_[h * width_ + w]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }
  std::vector<T>&& take() && noexcept { return std::move(data_); }

  bool same_dims(const auto& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }

  friend bool operator==(const Plane&, const Plane&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

using RealPlane = Plane<double>;

inline std::string dims_string(std::size_t h, std::size_t w) {
  return std::to_string(h) + "x" + std::to_string(w);
}

template <class A, class B>
void require_same_dims(const A& a, const B& b, const char* what) {
  if (!a.same_dims(b)) {
    throw UsageError(std::string(what) + ": dimension mismatch " +
                     dims_string(a.height(), a.width()) + " vs " +
                     dims_string(b.height(), b.width()));
  }
}

inline void require_finite(const RealPlane& plane, const char* what) {
  for (std::size_t i = 0; i < plane.size(); ++i) {
    if (!std::isfinite(plane[i])) {
      throw NumericalError(std::string(what) + ": non-finite entry at index " +
                           std::to_string(i));
    }
  }
}

inline double max_abs_diff(const RealPlane& a, const RealPlane& b) {
  require_same_dims(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double mean(const RealPlane& p) {
  double s = 0.0;
  for (double v : p.values()) s += v;
  return p.empty() ? 0.0 : s / static_cast<double>(p.size());
}

}  // namespace fanfreq
