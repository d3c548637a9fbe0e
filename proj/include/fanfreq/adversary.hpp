#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fanfreq/error.hpp"
#include "fanfreq/nn.hpp"
#include "fanfreq/ops.hpp"
#include "fanfreq/tape.hpp"

namespace fanfreq {

/// K-way site classifier over an amplitude spectrum:
/// standardized log amplitude - conv(1->16, s2) - relu - conv(16->32, s2) - relu - GAP - linear(32->K).
/// The linear head starts at zero, so an untrained classifier predicts the
/// uniform distribution.
class DomainClassifier {
 public:
  DomainClassifier() = default;
  DomainClassifier(std::size_t num_domains, nn::Rng& rng)
      : num_domains_(num_domains),
        conv1_(1, 16, 3, 2, 1, rng),
        conv2_(16, 32, 3, 2, 1, rng),
        head_(32, num_domains, rng) {
    if (num_domains < 2) {
      throw UsageError("domain classifier needs at least 2 domains, got " +
                       std::to_string(num_domains));
    }
    head_.zero_init();
  }

  std::size_t num_domains() const noexcept { return num_domains_; }

  /// Logits [1,K] for one amplitude plane (1x1xHxW). The input passes
  /// log(1 + fftshift(.)), per-image standardization and then the gradient
  /// reversal layer, so the classifier descends the cross-entropy while
  /// everything upstream ascends it.
  Var operator()(Tape& tape, Var amplitude, bool reverse_gradient = true) {
    Var features = ops::standardize(ops::log1p(ops::fftshift(amplitude)));
    if (reverse_gradient) features = ops::grad_reverse(features);
    Var h = ops::relu(conv1_(tape, features));
    h = ops::relu(conv2_(tape, h));
    return head_(tape, ops::global_avg_pool(h));
  }

  nn::ParamList parameters() {
    nn::ParamList out;
    conv1_.collect("dc.conv1", out);
    conv2_.collect("dc.conv2", out);
    head_.collect("dc.head", out);
    return out;
  }

 private:
  std::size_t num_domains_ = 0;
  nn::Conv2d conv1_;
  nn::Conv2d conv2_;
  nn::Linear head_;
};

inline Var classify_domain(Tape& tape, DomainClassifier& dc, Var amplitude) {
  return dc(tape, amplitude);
}

/// Index (1-based) of the largest logit; ties resolve to the lowest index.
inline int predicted_class(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = j;
  }
  return static_cast<int>(best) + 1;
}

/// Fraction of rows whose argmax matches the 1-based label.
inline double domain_accuracy(std::span<const std::vector<double>> logits,
                              std::span<const int> labels) {
  if (logits.empty() || logits.size() != labels.size()) {
    throw UsageError("domain_accuracy: need a nonempty batch with one label per row");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    hits += predicted_class(logits[i]) == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

}  // namespace fanfreq
