#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fanfreq/adversary.hpp"
#include "fanfreq/data.hpp"
#include "fanfreq/fan.hpp"
#include "oracles.hpp"

using namespace fanfreq;

namespace {

Tensor amplitude_tensor(const RealPlane& image) {
  const AmpPhase ap = decompose(dft2(image));
  return nn::image_tensor(ap.amplitude.vector(), image.height(), image.width());
}

std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (double& v : p) v /= s;
  return p;
}

void perturb(const nn::ParamList& params, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (const auto& p : params) {
    for (double& v : p.tensor->values) v += d(rng);
  }
}

/// CE of the DC on FAN's combined amplitude for one image.
double domain_loss(FanModel& fan, DomainClassifier& dc, const RealPlane& x, int label,
                   bool reverse = true, bool backward = false) {
  Tape tape;
  const FanOutput out = fan_forward(tape, fan, x);
  const Var loss = ops::softmax_cross_entropy(dc(tape, out.amp_combined, reverse), {label});
  if (backward) tape.backward(loss);
  return loss.item();
}

}  // namespace

TEST(DomainClassifier, UntrainedHeadGivesLogK) {
  for (std::size_t k : {2u, 3u, 8u}) {
    nn::Rng rng(5);
    DomainClassifier dc(k, rng);
    Tape tape;
    const Var amp = tape.constant(amplitude_tensor(oracle::random_plane(16, 16, 2)));
    const Var logits = dc(tape, amp);
    ASSERT_EQ(logits.shape(), (Shape{1, k}));
    const Var loss = ops::softmax_cross_entropy(logits, {1});
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(k)), 1e-12) << k;
  }
}

TEST(DomainClassifier, RejectsFewerThanTwoDomains) {
  nn::Rng rng(1);
  EXPECT_THROW(DomainClassifier(1, rng), UsageError);
}

TEST(DomainClassifier, LabelOutsideKRejected) {
  nn::Rng rng(1);
  DomainClassifier dc(3, rng);
  Tape tape;
  const Var amp = tape.constant(amplitude_tensor(oracle::random_plane(16, 16, 2)));
  EXPECT_THROW(ops::softmax_cross_entropy(dc(tape, amp), {4}), UsageError);
}

TEST(DomainClassifier, SoftmaxRowsSumToOne) {
  nn::Rng rng(3);
  DomainClassifier dc(5, rng);
  perturb(dc.parameters(), 4, 0.5);
  for (std::uint64_t s = 0; s < 5; ++s) {
    Tape tape;
    const Var amp = tape.constant(amplitude_tensor(oracle::random_plane(16, 16, s)));
    const auto p = softmax(dc(tape, amp).values());
    double total = 0.0;
    for (double v : p) total += v;
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(GradientReversal, FanGradientIsExactlyNegated) {
  nn::Rng rng(21);
  FanModel fan = FanModel::create(0.1, FanArch{4}, rng);
  DomainClassifier dc(3, rng);
  perturb(fan.parameters(), 8, 0.05);
  perturb(dc.parameters(), 9, 0.2);
  const RealPlane x = oracle::random_plane(16, 16, 13);

  auto fan_params = fan.parameters();
  auto dc_params = dc.parameters();
  nn::zero_grad(fan_params);
  nn::zero_grad(dc_params);
  domain_loss(fan, dc, x, 2, true, true);
  std::vector<std::vector<double>> with_grl, dc_with;
  for (const auto& p : fan_params) with_grl.push_back(p.tensor->grad);
  for (const auto& p : dc_params) dc_with.push_back(p.tensor->grad);

  nn::zero_grad(fan_params);
  nn::zero_grad(dc_params);
  domain_loss(fan, dc, x, 2, false, true);
  bool any_nonzero = false;
  for (std::size_t i = 0; i < fan_params.size(); ++i) {
    const auto& g = fan_params[i].tensor->grad;
    ASSERT_EQ(g.size(), with_grl[i].size()) << fan_params[i].name;
    for (std::size_t j = 0; j < g.size(); ++j) {
      EXPECT_EQ(with_grl[i][j], -g[j]) << fan_params[i].name << "[" << j << "]";
      any_nonzero = any_nonzero || g[j] != 0.0;
    }
  }
  EXPECT_TRUE(any_nonzero);
  for (std::size_t i = 0; i < dc_params.size(); ++i) {
    EXPECT_EQ(dc_params[i].tensor->grad, dc_with[i]) << dc_params[i].name;
  }
}

TEST(GradientReversal, SmallStepDescendsForDcAndAscendsForFan) {
  nn::Rng rng(33);
  FanModel fan = FanModel::create(0.1, FanArch{4}, rng);
  DomainClassifier dc(3, rng);
  perturb(fan.parameters(), 10, 0.05);
  perturb(dc.parameters(), 11, 0.2);
  const RealPlane x = oracle::random_plane(16, 16, 14);
  auto fan_params = fan.parameters();
  auto dc_params = dc.parameters();

  nn::zero_grad(fan_params);
  nn::zero_grad(dc_params);
  const double l0 = domain_loss(fan, dc, x, 3, true, true);

  std::vector<std::vector<double>> fan_values, dc_values;
  for (const auto& p : fan_params) fan_values.push_back(p.tensor->values);
  for (const auto& p : dc_params) dc_values.push_back(p.tensor->values);

  const double step = 1e-6;
  nn::sgd_step(dc_params, step);
  const double l_dc = domain_loss(fan, dc, x, 3);
  EXPECT_LT(l_dc, l0);
  for (std::size_t i = 0; i < dc_params.size(); ++i) dc_params[i].tensor->values = dc_values[i];

  nn::sgd_step(fan_params, step);
  const double l_fan = domain_loss(fan, dc, x, 3);
  EXPECT_GT(l_fan, l0);
  for (std::size_t i = 0; i < fan_params.size(); ++i) fan_params[i].tensor->values = fan_values[i];
}

TEST(DomainClassifier, SeparatesTwoSitesWithFrozenFan) {
  const std::vector<SiteStyle> styles = default_styles();
  MultiSiteDataset train = generate_dataset({styles[0], styles[3]}, 40, 101, 32);
  MultiSiteDataset test = generate_dataset({styles[0], styles[3]}, 40, 202, 32);
  // The separability oracle must hold before the classifier is judged.
  ASSERT_GT(probe_site_accuracy(train), 0.9);

  nn::Rng rng(7);
  FanModel fan = FanModel::create(0.1, FanArch{4}, rng);
  nn::set_trainable(fan.parameters(), false);
  DomainClassifier dc(2, rng);
  auto params = dc.parameters();

  std::vector<const SiteSample*> pool;
  for (const auto& site : train.sites) {
    for (const auto& s : site) pool.push_back(&s);
  }
  std::mt19937_64 order(3);
  const std::size_t batch = 8;
  for (int step = 0; step < 200; ++step) {
    nn::zero_grad(params);
    for (std::size_t b = 0; b < batch; ++b) {
      const SiteSample& s = *pool[order() % pool.size()];
      Tape tape;
      const FanOutput out = fan_forward(tape, fan, zscore(s.image));
      const Var loss = ops::softmax_cross_entropy(dc(tape, out.amp_combined), {s.y_dom});
      tape.backward(loss, 1.0 / batch);

    }
    // Linear annealing lets the head bias settle once the features separate.
    nn::sgd_step(params, 0.1 * (1.0 - step / 200.0));
  }

  std::vector<std::vector<double>> logits;
  std::vector<int> labels;
  for (const auto& site : test.sites) {
    for (const auto& s : site) {
      Tape tape;
      const FanOutput out = fan_forward(tape, fan, zscore(s.image));
      logits.push_back(dc(tape, out.amp_combined).values());
      labels.push_back(s.y_dom);
    }
  }
  EXPECT_GT(domain_accuracy(logits, labels), 0.9);
}

TEST(DomainAccuracy, AllCorrectIsOne) {
  const std::vector<std::vector<double>> logits{{3, 1, 0}, {0, 2, 1}, {0, 0, 5}};
  const std::vector<int> labels{1, 2, 3};
  EXPECT_EQ(domain_accuracy(logits, labels), 1.0);
}

TEST(DomainAccuracy, PermutedLabelsOnTwoClassesIsZero) {
  const std::vector<std::vector<double>> logits{{2, 1}, {1, 2}, {5, 0}, {0, 5}};
  const std::vector<int> labels{2, 1, 2, 1};
  EXPECT_EQ(domain_accuracy(logits, labels), 0.0);
}

TEST(DomainAccuracy, TiesGoToLowestIndex) {
  EXPECT_EQ(predicted_class(std::vector<double>{1.0, 1.0, 1.0}), 1);
  EXPECT_EQ(predicted_class(std::vector<double>{0.0, 2.0, 2.0}), 2);
  const std::vector<std::vector<double>> logits{{0, 0}, {0, 0}};
  const std::vector<int> labels{1, 2};
  EXPECT_EQ(domain_accuracy(logits, labels), 0.5);
}

TEST(DomainAccuracy, EmptyOrMismatchedBatchRejected) {
  const std::vector<std::vector<double>> none;
  const std::vector<int> no_labels;
  EXPECT_THROW(domain_accuracy(none, no_labels), UsageError);
  const std::vector<std::vector<double>> one{{1, 0}};
  const std::vector<int> two{1, 2};
  EXPECT_THROW(domain_accuracy(one, two), UsageError);
}

TEST(DomainAccuracy, UniformRandomPredictorNearChance) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> label(1, 8);
  std::vector<std::vector<double>> logits(10000, std::vector<double>(8));
  std::vector<int> labels(10000);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    for (double& v : logits[i]) v = u(rng);
    labels[i] = label(rng);
  }
  EXPECT_NEAR(domain_accuracy(logits, labels), 0.125, 0.01);
}
