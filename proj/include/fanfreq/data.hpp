#pragma once

// Synthetic multi-site images. Every sample is an elliptical "anatomy" with
// two darker inner structures and up to three brighter elliptical lesions;
// the segmentation mask is the lesion union. A site style then applies an
// intensity affine map, scales the low-frequency amplitude (alpha = 0.1
// region), adds Gaussian noise and clips to [0,1]. Geometry depends only on
// (seed, index), so equal seeds give equal masks across sites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fanfreq/error.hpp"
#include "fanfreq/fourier.hpp"
#include "fanfreq/pgm.hpp"
#include "fanfreq/plane.hpp"

namespace fanfreq {

/// Mask ratio of the frequency band a site style rescales.
inline constexpr double kStyleAlpha = 0.1;
/// Intensity of the empty field around the anatomy, kept above zero so that
/// noise does not clip.
inline constexpr double kBackground = 0.08;

struct SiteStyle {
  int site_id = 1;
  double lowfreq_gain = 1.0;
  double intensity_bias = 0.0;
  double intensity_gain = 1.0;
  double noise_sigma = 0.0;
};

struct SiteSample {
  RealPlane image;
  int y_dom = 1;
  RealPlane y_seg;
  std::uint64_t seed = 0;
  int source_site = 1;  ///< site id before any relabelling
  std::size_t index = 0;  ///< position within its site

  bool lesion_free() const {
    return std::none_of(y_seg.values().begin(), y_seg.values().end(),
                        [](double v) { return v != 0.0; });
  }
};

/// Per-site sample lists; sites[k-1] holds site k.
struct MultiSiteDataset {
  std::vector<SiteStyle> styles;
  std::vector<std::vector<SiteSample>> sites;

  std::size_t num_sites() const noexcept { return sites.size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& s : sites) n += s.size();
    return n;
  }
};

/// Reference styles for K = 4. Sites differ mainly in low-frequency gain,
/// with small intensity shifts on top.
inline std::vector<SiteStyle> default_styles() {
  return {
      {1, 0.50, 0.04, 1.10, 0.020},
      {2, 1.00, 0.00, 0.95, 0.020},
      {3, 1.60, -0.02, 1.00, 0.020},
      {4, 2.60, 0.02, 0.95, 0.020},
  };
}

/// Styles for K sites: the defaults when K <= 4, otherwise low-frequency
/// gains spaced geometrically over [0.5, 2.6] with the default intensity
/// and noise settings cycled.
inline std::vector<SiteStyle> site_styles(std::size_t k) {
  if (k == 0) throw UsageError("need at least one site");
  std::vector<SiteStyle> base = default_styles();
  if (k <= base.size()) {
    base.resize(k);
    return base;
  }
  std::vector<SiteStyle> out;
  for (std::size_t i = 0; i < k; ++i) {
    SiteStyle s = base[i % base.size()];
    s.site_id = static_cast<int>(i) + 1;
    s.lowfreq_gain = 0.5 * std::pow(2.6 / 0.5, static_cast<double>(i) / static_cast<double>(k - 1));
    out.push_back(s);
  }
  return out;
}

inline void validate(const SiteStyle& s) {
  if (s.site_id < 1) throw UsageError("site id must be >= 1");
  if (!(s.lowfreq_gain > 0.0) || !(s.intensity_gain > 0.0) || !(s.noise_sigma >= 0.0) ||
      !std::isfinite(s.intensity_bias)) {
    throw UsageError("invalid style for site " + std::to_string(s.site_id));
  }
}

/// splitmix64 finalizer over (a, b).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct BaseImage {
  RealPlane image;
  RealPlane mask;
};

namespace detail {

struct Ellipse {
  double cy, cx, ry, rx, theta;

  // Normalized radius; <= 1 inside.
  double radius(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    return std::sqrt(u * u + v * v);
  }
};

}  // namespace detail

/// Unstyled image and lesion mask for one geometry seed.
inline BaseImage generate_base(std::uint64_t sample_seed, std::size_t size) {
  if (size < 16) throw UsageError("image size must be at least 16");
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double n = static_cast<double>(size);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const detail::Ellipse anatomy{n / 2 + range(-0.05, 0.05) * n, n / 2 + range(-0.05, 0.05) * n,
                                range(0.30, 0.40) * n, range(0.28, 0.38) * n,
                                range(0.0, std::numbers::pi)};
  std::vector<detail::Ellipse> inner;
  for (int i = 0; i < 2; ++i) {
    const double side = i == 0 ? -1.0 : 1.0;
    inner.push_back({anatomy.cy + range(-0.05, 0.05) * n, anatomy.cx + side * range(0.06, 0.10) * n,
                     range(0.08, 0.14) * n, range(0.03, 0.06) * n, range(-0.3, 0.3)});
  }

  BaseImage out{RealPlane(size, size, 0.0), RealPlane(size, size, 0.0)};
  const int lesions = static_cast<int>(rng() % 4);
  for (int l = 0; l < lesions; ++l) {
    // Redraw until the lesion covers at least one pixel inside the anatomy.
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double r = range(0.0, 0.65);
      const double phi = range(0.0, 2.0 * std::numbers::pi);
      const double ry = range(0.03, 0.08) * n, rx = range(0.03, 0.08) * n;
      if (ry <= 0.0 || rx <= 0.0) continue;
      const detail::Ellipse e{anatomy.cy + r * anatomy.ry * std::sin(phi),
                              anatomy.cx + r * anatomy.rx * std::cos(phi), ry, rx,
                              range(0.0, std::numbers::pi)};
      RealPlane candidate(size, size, 0.0);
      std::size_t area = 0;
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double yy = static_cast<double>(y) + 0.5, xx = static_cast<double>(x) + 0.5;
          if (e.radius(yy, xx) <= 1.0 && anatomy.radius(yy, xx) <= 0.95) {
            candidate(y, x) = 1.0;
            ++area;
          }
        }
      }
      if (area == 0) continue;
      for (std::size_t i = 0; i < candidate.size(); ++i) out.mask[i] = std::max(out.mask[i], candidate[i]);
      break;
    }
  }

  const double tissue = range(0.16, 0.19);
  const double lesion_contrast = range(0.09, 0.11);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double yy = static_cast<double>(y) + 0.5, xx = static_cast<double>(x) + 0.5;
      // Soft boundary of width ~ n/40 around the anatomy.
      const double body = 1.0 / (1.0 + std::exp((anatomy.radius(yy, xx) - 1.0) * 25.0));
      double v = kBackground + tissue * body;
      for (const auto& e : inner) {
        if (e.radius(yy, xx) <= 1.0) v -= 0.075 * body;
      }
      if (out.mask(y, x) != 0.0) v += lesion_contrast;
      out.image(y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

/// Applies a site style to a base image with a given noise seed.
inline RealPlane apply_style(const RealPlane& base, const SiteStyle& style,
                             std::uint64_t noise_seed) {
  validate(style);
  RealPlane img = base;
  for (double& v : img.values()) v = style.intensity_gain * v + style.intensity_bias;
  if (style.lowfreq_gain != 1.0) {
    ComplexPlane spec = dft2(img);
    const RealPlane mask = build_mask({kStyleAlpha, img.height(), img.width()});
    for (std::size_t i = 0; i < spec.size(); ++i) {
      if (mask[i] != 0.0) spec[i] *= style.lowfreq_gain;
    }
    img = idft2(spec);
  }
  if (style.noise_sigma > 0.0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> noise(0.0, style.noise_sigma);
    for (double& v : img.values()) v += noise(rng);
  }
  for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// n samples of site k. Sample i uses geometry seed mix_seed(seed, i) and
/// noise seed mix_seed(geometry seed, k).
inline std::vector<SiteSample> generate_site_dataset(int k, const SiteStyle& style, std::size_t n,
                                                     std::uint64_t seed, std::size_t size = 64) {
  if (n == 0) throw UsageError("generate_site_dataset: n must be >= 1");
  std::vector<SiteSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t sample_seed = mix_seed(seed, i);
    BaseImage base = generate_base(sample_seed, size);
    SiteSample s;
    s.image = apply_style(base.image, style, mix_seed(sample_seed, static_cast<std::uint64_t>(k)));
    s.y_seg = std::move(base.mask);
    s.y_dom = k;
    s.source_site = k;
    s.seed = sample_seed;
    s.index = i;
    out.push_back(std::move(s));
  }
  return out;
}

/// Site k draws its geometry from mix_seed(seed, k).
inline MultiSiteDataset generate_dataset(const std::vector<SiteStyle>& styles, std::size_t n,
                                         std::uint64_t seed, std::size_t size = 64) {
  MultiSiteDataset ds;
  ds.styles = styles;
  for (std::size_t k = 1; k <= styles.size(); ++k) {
    ds.sites.push_back(generate_site_dataset(static_cast<int>(k), styles[k - 1], n,
                                             mix_seed(seed, k), size));
  }
  return ds;
}

struct LosoSplit {
  std::vector<SiteSample> train;  ///< y_dom relabelled to 1..K-1
  std::vector<SiteSample> test;
  std::vector<int> train_sites;   ///< train_sites[label-1] = original site id
  int held_out = 0;
};

inline LosoSplit leave_one_site_out(const MultiSiteDataset& ds, int held_out) {
  const auto k = static_cast<int>(ds.num_sites());
  if (k < 3) throw UsageError("leave-one-site-out needs at least 3 sites, got " + std::to_string(k));
  if (held_out < 1 || held_out > k) {
    throw UsageError("held-out site " + std::to_string(held_out) + " not in 1.." + std::to_string(k));
  }
  LosoSplit split;
  split.held_out = held_out;
  for (int site = 1; site <= k; ++site) {
    const auto& samples = ds.sites[static_cast<std::size_t>(site - 1)];
    if (site == held_out) {
      split.test = samples;
      continue;
    }
    split.train_sites.push_back(site);
    const int label = static_cast<int>(split.train_sites.size());
    for (SiteSample s : samples) {
      s.y_dom = label;
      split.train.push_back(std::move(s));
    }
  }
  return split;
}

/// Per-image standardization; an image whose spread is at rounding level
/// is treated as constant and only centred.
inline RealPlane zscore(const RealPlane& img) {
  const double m = mean(img);
  double var = 0.0;
  for (double v : img.values()) var += (v - m) * (v - m);
  var /= static_cast<double>(img.size());
  const double sd = std::sqrt(var);
  RealPlane out = img;
  const bool flat = sd <= 1e-12 * std::max(1.0, std::abs(m));
  for (double& v : out.values()) v = flat ? v - m : (v - m) / sd;
  return out;
}

// ---------------------------------------------------------------------------
// Separability probe

/// Mean of log(1 + A) over the alpha = 0.1 low-frequency bins of a raw image.
inline double masked_log_amplitude(const RealPlane& img) {
  const AmpPhase ap = decompose(dft2(img));
  const RealPlane mask = build_mask({kStyleAlpha, img.height(), img.width()});
  RealPlane logs = ap.amplitude;
  for (double& v : logs.values()) v = std::log1p(v);
  return mean_masked(logs, mask);
}

/// One-vs-rest least-squares classifier on a cubic expansion of the scalar
/// feature masked_log_amplitude. Fit on even sample indices, scored on odd.
inline double probe_site_accuracy(const MultiSiteDataset& ds) {
  struct Row {
    double f;
    int site;
    bool fit;
  };
  std::vector<Row> rows;
  for (std::size_t k = 0; k < ds.num_sites(); ++k) {
    for (std::size_t i = 0; i < ds.sites[k].size(); ++i) {
      rows.push_back({masked_log_amplitude(ds.sites[k][i].image), static_cast<int>(k) + 1, i % 2 == 0});
    }
  }
  double mu = 0.0, sd = 0.0;
  for (const auto& r : rows) mu += r.f;
  mu /= static_cast<double>(rows.size());
  for (const auto& r : rows) sd += (r.f - mu) * (r.f - mu);
  sd = std::sqrt(sd / static_cast<double>(rows.size()));
  if (sd == 0.0) sd = 1.0;
  auto features = [&](double f) {
    const double z = (f - mu) / sd;
    return Eigen::Vector4d(1.0, z, z * z, z * z * z);
  };
  const auto k = static_cast<Eigen::Index>(ds.num_sites());
  Eigen::Matrix4d gram = Eigen::Matrix4d::Zero();
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(4, k);
  std::size_t fit_rows = 0;
  for (const auto& r : rows) {
    if (!r.fit) continue;
    const Eigen::Vector4d phi = features(r.f);
    gram += phi * phi.transpose();
    rhs.col(r.site - 1) += phi;
    ++fit_rows;
  }
  if (fit_rows == 0) throw UsageError("probe needs at least one sample per site");
  const Eigen::MatrixXd coef = gram.ldlt().solve(rhs);
  std::size_t hits = 0, scored = 0;
  for (const auto& r : rows) {
    if (r.fit && rows.size() > fit_rows) continue;
    const Eigen::VectorXd scores = coef.transpose() * features(r.f);
    Eigen::Index best = 0;
    scores.maxCoeff(&best);
    hits += static_cast<int>(best) + 1 == r.site ? 1 : 0;
    ++scored;
  }
  return static_cast<double>(hits) / static_cast<double>(scored);
}

// ---------------------------------------------------------------------------
// On-disk layout: site_<k>/img_<i>.pgm (16-bit), site_<k>/seg_<i>.pgm (8-bit)
// and manifest.txt with one "img seg site seed" line per sample.

inline void write_dataset(const std::filesystem::path& dir, const MultiSiteDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.txt").string());
  for (std::size_t k = 1; k <= ds.num_sites(); ++k) {
    const std::string site = "site_" + std::to_string(k);
    fs::create_directories(dir / site);
    for (const auto& s : ds.sites[k - 1]) {
      const std::string img = site + "/img_" + std::to_string(s.index) + ".pgm";
      const std::string seg = site + "/seg_" + std::to_string(s.index) + ".pgm";
      io::save_pgm(dir / img, s.image, 16);
      io::save_pgm(dir / seg, s.y_seg, 8);
      manifest << img << ' ' << seg << ' ' << k << ' ' << s.seed << '\n';
    }
  }
  if (!manifest) throw IoError("manifest write failed");
}

inline MultiSiteDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot open " + (dir / "manifest.txt").string());
  MultiSiteDataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string img, seg;
    int site = 0;
    std::uint64_t seed = 0;
    if (!(fields >> img >> seg >> site >> seed) || site < 1) {
      throw IoError("manifest.txt line " + std::to_string(line_no) + ": malformed entry");
    }
    if (ds.sites.size() < static_cast<std::size_t>(site)) ds.sites.resize(static_cast<std::size_t>(site));
    SiteSample s;
    s.image = io::load_pgm(dir / img).pixels;
    s.y_seg = io::load_pgm(dir / seg).pixels;
    for (double& v : s.y_seg.values()) v = v >= 0.5 ? 1.0 : 0.0;
    require_same_dims(s.image, s.y_seg, "read_dataset");
    s.y_dom = site;
    s.source_site = site;
    s.seed = seed;
    auto& bucket = ds.sites[static_cast<std::size_t>(site - 1)];
    s.index = bucket.size();
    bucket.push_back(std::move(s));
  }
  for (std::size_t k = 0; k < ds.sites.size(); ++k) {
    if (ds.sites[k].empty()) throw IoError("dataset has no samples for site " + std::to_string(k + 1));
  }
  return ds;
}

}  // namespace fanfreq
