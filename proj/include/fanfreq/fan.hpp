#pragma once

// Fourier-based adaptive normalization. Two small networks read the
// log-compressed amplitude spectrum and emit per-image scalars gamma, beta;
// inside the low-frequency mask the amplitude becomes gamma * A + beta, the
// rest of the spectrum and the whole phase are kept, and the result is
// synthesized back into an image.

#include <cmath>
#include <cstddef>
#include <string>

#include "fanfreq/fourier.hpp"
#include "fanfreq/nn.hpp"
#include "fanfreq/ops.hpp"
#include "fanfreq/tape.hpp"

namespace fanfreq {

/// Widths of the gamma/beta networks.
struct FanArch {
  std::size_t hidden = 8;
};

/// conv(1->h, 3x3, s2) - relu - conv(h->h, 3x3, s2) - relu - conv(h->1, 1x1) - GAP.
/// The last conv starts at zero so the network initially outputs 0.
class AffineNet {
 public:
  AffineNet() = default;
  AffineNet(const FanArch& arch, nn::Rng& rng)
      : conv1_(1, arch.hidden, 3, 2, 1, rng),
        conv2_(arch.hidden, arch.hidden, 3, 2, 1, rng),
        head_(arch.hidden, 1, 1, 1, 0, rng) {
    head_.zero_init();
  }

  /// features: 1x1xHxW -> scalar tensor of shape [1].
  Var operator()(Tape& tape, Var features) {
    Var h = ops::relu(conv1_(tape, features));
    h = ops::relu(conv2_(tape, h));
    return ops::reshape(ops::global_avg_pool(head_(tape, h)), {1});
  }

  void collect(const std::string& prefix, nn::ParamList& out) {
    conv1_.collect(prefix + ".conv1", out);
    conv2_.collect(prefix + ".conv2", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  nn::Conv2d conv1_;
  nn::Conv2d conv2_;
  nn::Conv2d head_;
};

struct FanModel {
  AffineNet beta_net;
  AffineNet gamma_net;
  double alpha = 0.1;
  FanArch arch;

  static FanModel create(double alpha, const FanArch& arch, nn::Rng& rng) {
    FanModel m;
    m.alpha = alpha;
    m.arch = arch;
    m.beta_net = AffineNet(arch, rng);
    m.gamma_net = AffineNet(arch, rng);
    return m;
  }

  nn::ParamList parameters() {
    nn::ParamList out;
    beta_net.collect("fan.beta", out);
    gamma_net.collect("fan.gamma", out);
    return out;
  }
};

struct FanOutput {
  Var x_prime;       ///< normalized image, 1x1xHxW
  Var amp_adjusted;  ///< gamma * A + beta over the full plane, clamped at 0
  Var amp_combined;  ///< adjusted amplitude inside the mask, original outside
  Var gamma;
  Var beta;
  std::size_t clamped = 0;  ///< bins whose adjusted amplitude was negative
};

/// log(1 + fftshift(A)) as a 1x1xHxW tensor.
inline Tensor fan_input_features(const RealPlane& amplitude) {
  const RealPlane shifted = fftshift(amplitude);
  Tensor t({1, 1, amplitude.height(), amplitude.width()});
  for (std::size_t i = 0; i < shifted.size(); ++i) t.values[i] = std::log1p(shifted[i]);
  return t;
}

/// Applies a given (gamma, beta) to the spectrum `ap` inside `mask` and
/// synthesizes the image.
inline FanOutput fan_apply(Tape& tape, const AmpPhase& ap, const RealPlane& mask, Var gamma,
                           Var beta) {
  require_same_dims(ap.amplitude, mask, "fan_apply");
  const std::size_t h = mask.height(), w = mask.width();
  const Var amp = tape.constant(nn::image_tensor(ap.amplitude.vector(), h, w));
  const Var raw = ops::add_scalar(ops::mul_scalar(amp, gamma), beta);
  std::size_t clamped = 0;
  for (double v : raw.values()) clamped += v < 0.0 ? 1 : 0;
  const Var adjusted = ops::relu(raw);

  // M * A' + (1 - M) * A
  std::vector<double> keep(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = (1.0 - mask[i]) * ap.amplitude[i];
  const Var combined = ops::add_const(ops::mul_const(adjusted, mask.vector()), keep);
  const Var x_prime = ops::spectrum_recombine(combined, ap.phase);
  return FanOutput{x_prime, adjusted, combined, gamma, beta, clamped};
}

/// Full FAN forward on one image; gradients reach both affine networks.
inline FanOutput fan_forward(Tape& tape, FanModel& model, const RealPlane& image) {
  const AmpPhase ap = decompose(dft2(image));
  const RealPlane mask = build_mask({model.alpha, image.height(), image.width()});
  const Var features = tape.constant(fan_input_features(ap.amplitude));
  const Var beta = model.beta_net(tape, features);
  const Var gamma = ops::add_const(model.gamma_net(tape, features), {1.0});
  return fan_apply(tape, ap, mask, gamma, beta);
}

}  // namespace fanfreq
