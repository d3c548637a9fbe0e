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

struct SegConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 8;
  /// Initial bias of the sigmoid head.
  double head_bias = -2.0;
};

/// Compact U-Net: per level two 3x3 conv-relu, 2x2 max pooling on the way
/// down, nearest upsampling plus skip concatenation on the way up, and a 1x1
/// conv with sigmoid head. Spatial size is preserved.
class SegModel {
 public:
  SegModel() = default;
  SegModel(const SegConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    if (cfg.depth == 0 || cfg.base_channels == 0) {
      throw UsageError("segmenter depth and base channels must be positive");
    }
    std::size_t in = 1;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::size_t ch = cfg.base_channels << l;
      down_.push_back({nn::Conv2d(in, ch, 3, 1, 1, rng), nn::Conv2d(ch, ch, 3, 1, 1, rng)});
      in = ch;
    }
    const std::size_t bottom = cfg.base_channels << cfg.depth;
    bottleneck_ = {nn::Conv2d(in, bottom, 3, 1, 1, rng), nn::Conv2d(bottom, bottom, 3, 1, 1, rng)};
    in = bottom;
    for (std::size_t l = cfg.depth; l-- > 0;) {
      const std::size_t ch = cfg.base_channels << l;
      up_.push_back({nn::Conv2d(in + ch, ch, 3, 1, 1, rng), nn::Conv2d(ch, ch, 3, 1, 1, rng)});
      in = ch;
    }
    head_ = nn::Conv2d(in, 1, 1, 1, 0, rng);
    head_.bias.values[0] = cfg.head_bias;
  }

  const SegConfig& config() const noexcept { return cfg_; }

  void check_input(std::size_t h, std::size_t w) const {
    const std::size_t div = std::size_t{1} << cfg_.depth;
    if (h % div != 0 || w % div != 0 || h == 0 || w == 0) {
      throw UsageError("segmenter input " + std::to_string(h) + "x" + std::to_string(w) +
                       " must be divisible by " + std::to_string(div) + " (2^depth)");
    }
  }

  /// x: NxCxHxW with C = 1 -> probabilities of the same shape.
  Var operator()(Tape& tape, Var x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != 1) {
      throw UsageError("segmenter expects Nx1xHxW input, got " + shape_string(s));
    }
    check_input(s[2], s[3]);
    std::vector<Var> skips;
    Var h = x;
    for (auto& block : down_) {
      h = block.apply(tape, h);
      skips.push_back(h);
      h = ops::max_pool2d(h);
    }
    h = bottleneck_.apply(tape, h);
    for (auto& block : up_) {
      const Var skip = skips.back();
      skips.pop_back();
      h = block.apply(tape, ops::concat_channels(ops::upsample2x(h), skip));
    }
    return ops::sigmoid(head_(tape, h));
  }

  nn::ParamList parameters() {
    nn::ParamList out;
    for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect("seg.down" + std::to_string(i), out);
    bottleneck_.collect("seg.bottleneck", out);
    for (std::size_t i = 0; i < up_.size(); ++i) up_[i].collect("seg.up" + std::to_string(i), out);
    head_.collect("seg.head", out);
    return out;
  }

 private:
  struct Block {
    nn::Conv2d first;
    nn::Conv2d second;

    Var apply(Tape& tape, Var x) { return ops::relu(second(tape, ops::relu(first(tape, x)))); }

    void collect(const std::string& prefix, nn::ParamList& out) {
      first.collect(prefix + ".conv1", out);
      second.collect(prefix + ".conv2", out);
    }
  };

  SegConfig cfg_;
  std::vector<Block> down_;
  Block bottleneck_;
  std::vector<Block> up_;
  nn::Conv2d head_;
};

inline Var segment(Tape& tape, SegModel& model, Var x_prime) { return model(tape, x_prime); }

struct SegMetrics {
  double dice = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Pixelwise metrics of pred >= threshold against a binary target.
/// Conventions: empty target and empty prediction score 1 on every metric;
/// recall with an empty target is 1 and precision with an empty prediction is
/// 0, so dice and f1 agree on every input.
inline SegMetrics seg_metrics(std::span<const double> pred, std::span<const double> target,
                              double threshold = 0.5) {
  if (pred.size() != target.size()) {
    throw UsageError("seg_metrics: prediction has " + std::to_string(pred.size()) +
                     " pixels, target " + std::to_string(target.size()));
  }
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool t = target[i] >= 0.5;
    tp += (p && t) ? 1.0 : 0.0;
    fp += (p && !t) ? 1.0 : 0.0;
    fn += (!p && t) ? 1.0 : 0.0;
  }
  if (tp + fp + fn == 0.0) return {1.0, 1.0, 1.0};
  SegMetrics m;
  m.dice = 2.0 * tp / (2.0 * tp + fp + fn);
  m.recall = tp + fn > 0.0 ? tp / (tp + fn) : 1.0;
  const double precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  m.f1 = precision + m.recall > 0.0 ? 2.0 * precision * m.recall / (precision + m.recall) : 0.0;
  return m;
}

}  // namespace fanfreq
