#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "fanfreq/data.hpp"
#include "fanfreq/trainer.hpp"
#include "oracles.hpp"

using namespace fanfreq;

namespace {

/// Mean amplitude over the style mask, computed with the direct DFT.
double masked_amplitude(const RealPlane& img) {
  const auto spec = oracle::direct_dft2(img);
  const RealPlane mask = build_mask({kStyleAlpha, img.height(), img.width()});
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (mask[i] > 0.5) {
      s += std::abs(spec[i]);
      n += 1.0;
    }
  }
  return s / n;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fanfreq_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Styles, DefaultsHaveIncreasingLowFrequencyGain) {
  const auto styles = default_styles();
  ASSERT_EQ(styles.size(), 4u);
  for (std::size_t k = 0; k < styles.size(); ++k) {
    EXPECT_EQ(styles[k].site_id, static_cast<int>(k) + 1);
    if (k > 0) EXPECT_GT(styles[k].lowfreq_gain, styles[k - 1].lowfreq_gain);
  }
}

TEST(Styles, ExtendedSitesSpanGainRange) {
  const auto styles = site_styles(6);
  ASSERT_EQ(styles.size(), 6u);
  EXPECT_NEAR(styles.front().lowfreq_gain, 0.5, 1e-12);
  EXPECT_NEAR(styles.back().lowfreq_gain, 2.6, 1e-12);
  EXPECT_EQ(site_styles(3).size(), 3u);
  EXPECT_THROW(site_styles(0), UsageError);
}

TEST(Styles, InvalidStyleRejected) {
  const RealPlane base(16, 16, 0.5);
  EXPECT_THROW(apply_style(base, {1, 0.0, 0.0, 1.0, 0.0}, 1), UsageError);
  EXPECT_THROW(apply_style(base, {1, 1.0, 0.0, 1.0, -0.1}, 1), UsageError);
  EXPECT_THROW(apply_style(base, {0, 1.0, 0.0, 1.0, 0.0}, 1), UsageError);
}

TEST(ApplyStyle, NeutralStyleIsIdentity) {
  const BaseImage b = generate_base(17, 64);
  EXPECT_EQ(apply_style(b.image, {1, 1.0, 0.0, 1.0, 0.0}, 3).vector(), b.image.vector());
}

TEST(ApplyStyle, LowFrequencyGainScalesMaskedAmplitude) {
  // Two noiseless styles with gains 0.7 and 1.4 should differ by 2x inside the mask.
  double ratio = 0.0;
  const int n = 100;
  for (int i = 0; i < n; ++i) {
    const BaseImage b = generate_base(mix_seed(5, i), 16);
    const double lo = masked_amplitude(apply_style(b.image, {1, 0.7, 0.0, 1.0, 0.0}, 0));
    const double hi = masked_amplitude(apply_style(b.image, {2, 1.4, 0.0, 1.0, 0.0}, 0));
    ratio += lo / hi;
  }
  EXPECT_NEAR(ratio / n, 0.5, 0.05);
}

TEST(ApplyStyle, OutputStaysInUnitRange) {
  const BaseImage b = generate_base(3, 64);
  for (const auto& style : default_styles()) {
    const RealPlane img = apply_style(b.image, style, 9);
    for (double v : img.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(GenerateBase, MaskIsBinaryAndInsideImage) {
  std::size_t with_lesion = 0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    const BaseImage b = generate_base(s, 64);
    double area = 0.0;
    for (double v : b.mask.values()) {
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      area += v;
    }
    with_lesion += area > 0.0 ? 1 : 0;
  }
  // Lesion counts are uniform on {0..3}, so most samples carry one.
  EXPECT_GT(with_lesion, 20u);
  EXPECT_LT(with_lesion, 40u);
  EXPECT_THROW(generate_base(1, 8), UsageError);
}

TEST(GenerateDataset, DeterministicForSeed) {
  const auto a = generate_dataset(default_styles(), 5, 42, 32);
  const auto b = generate_dataset(default_styles(), 5, 42, 32);
  const auto c = generate_dataset(default_styles(), 5, 43, 32);
  ASSERT_EQ(a.num_sites(), 4u);
  EXPECT_EQ(a.total(), 20u);
  bool differs = false;
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(a.sites[k][i].image.vector(), b.sites[k][i].image.vector());
      EXPECT_EQ(a.sites[k][i].y_seg.vector(), b.sites[k][i].y_seg.vector());
      EXPECT_EQ(a.sites[k][i].y_dom, static_cast<int>(k) + 1);
      differs = differs || a.sites[k][i].image.vector() != c.sites[k][i].image.vector();
    }
  }
  EXPECT_TRUE(differs);
}

TEST(GenerateDataset, StyleDoesNotChangeGeometry) {
  const auto styles = default_styles();
  const auto a = generate_site_dataset(1, styles[0], 6, 11, 32);
  const auto b = generate_site_dataset(1, styles[3], 6, 11, 32);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a[i].y_seg.vector(), b[i].y_seg.vector());
    EXPECT_NE(a[i].image.vector(), b[i].image.vector());
  }
}

TEST(GenerateDataset, SitesAreSeparableBySpectrum) {
  const auto ds = generate_dataset(default_styles(), 200, 42, 64);
  EXPECT_GE(probe_site_accuracy(ds), 0.95);
}

TEST(GenerateDataset, MaskedLogAmplitudeIncreasesWithSite) {
  const auto ds = generate_dataset(default_styles(), 30, 42, 64);
  double prev = -1.0;
  for (const auto& site : ds.sites) {
    double m = 0.0;
    for (const auto& s : site) m += masked_log_amplitude(s.image);
    m /= static_cast<double>(site.size());
    EXPECT_GT(m, prev);
    prev = m;
  }
}

TEST(Loso, RelabelsSourcesAndKeepsTargetApart) {
  const auto ds = generate_dataset(default_styles(), 4, 42, 32);
  for (int held = 1; held <= 4; ++held) {
    const LosoSplit split = leave_one_site_out(ds, held);
    EXPECT_EQ(split.held_out, held);
    EXPECT_EQ(split.train.size(), 12u);
    EXPECT_EQ(split.test.size(), 4u);
    ASSERT_EQ(split.train_sites.size(), 3u);
    std::set<int> labels;
    for (const auto& s : split.train) {
      EXPECT_NE(s.source_site, held);
      EXPECT_EQ(split.train_sites[static_cast<std::size_t>(s.y_dom - 1)], s.source_site);
      labels.insert(s.y_dom);
    }
    EXPECT_EQ(labels, (std::set<int>{1, 2, 3}));
    for (const auto& s : split.test) EXPECT_EQ(s.source_site, held);
  }
}

TEST(Loso, RejectsBadSplits) {
  const auto ds = generate_dataset(default_styles(), 2, 42, 16);
  EXPECT_THROW(leave_one_site_out(ds, 0), UsageError);
  EXPECT_THROW(leave_one_site_out(ds, 5), UsageError);
  const auto two = generate_dataset(site_styles(2), 2, 42, 16);
  EXPECT_THROW(leave_one_site_out(two, 1), UsageError);
}

TEST(DomainValidation, EveryFifthSampleWithheld) {
  const auto ds = generate_dataset(default_styles(), 10, 42, 16);
  const LosoSplit split = leave_one_site_out(ds, 2);
  std::vector<SiteSample> fit, val;
  split_domain_validation(split.train, 5, fit, val);
  EXPECT_EQ(val.size(), 6u);
  EXPECT_EQ(fit.size(), 24u);
  for (const auto& s : val) EXPECT_EQ(s.index % 5, 4u);
}

TEST(Zscore, StandardizesAndCentresConstants) {
  const RealPlane z = zscore(oracle::random_plane(8, 8, 4, 0.0, 3.0));
  double m = 0.0, v = 0.0;
  for (double x : z.values()) m += x;
  m /= 64.0;
  for (double x : z.values()) v += (x - m) * (x - m);
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v / 64.0, 1.0, 1e-12);
  const RealPlane flat = zscore(RealPlane(4, 4, 0.3));
  for (double x : flat.values()) EXPECT_NEAR(x, 0.0, 1e-15);
}

TEST(DatasetIo, RoundTripThroughDirectory) {
  const auto ds = generate_dataset(default_styles(), 3, 42, 32);
  const auto dir = scratch_dir("dataset_io");
  write_dataset(dir, ds);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.num_sites(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    ASSERT_EQ(back.sites[k].size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& a = ds.sites[k][i];
      const auto& b = back.sites[k][i];
      EXPECT_EQ(b.seed, a.seed);
      EXPECT_EQ(b.y_dom, a.y_dom);
      EXPECT_EQ(b.y_seg.vector(), a.y_seg.vector());
      EXPECT_LE(max_abs_diff(a.image, b.image), 0.5 / 65535 + 1e-15);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, MissingManifestAndMalformedLines) {
  const auto dir = scratch_dir("dataset_bad");
  EXPECT_THROW(read_dataset(dir), IoError);
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "manifest.txt") << "only_two fields\n";
  try {
    read_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
  std::filesystem::remove_all(dir);
}
