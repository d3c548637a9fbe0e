#pragma once

// Joint training of FAN, domain classifier and segmenter on
//   L = L_dice + lambda * L_ce
// with plain SGD over every parameter. The gradient reversal inside the
// classifier turns the single descent step into descent for the classifier
// and ascent for the FAN networks.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fanfreq/adversary.hpp"
#include "fanfreq/data.hpp"
#include "fanfreq/error.hpp"
#include "fanfreq/fan.hpp"
#include "fanfreq/fant_io.hpp"
#include "fanfreq/nn.hpp"
#include "fanfreq/ops.hpp"
#include "fanfreq/segmenter.hpp"

namespace fanfreq {

struct TrainConfig {
  double lr = 0.001;
  /// Multiplicative learning-rate decay applied after each epoch.
  double lr_decay_per_epoch = 0.04;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  double lambda = 1.0;
  double alpha = 0.1;
  std::uint64_t seed = 42;
  /// Optional L2 coefficient folded into every SGD step (0 disables it).
  double l2 = 0.0;
  /// Gradient-norm ceiling applied to each sub-model per step (0 disables
  /// clipping).
  double grad_clip = 0.0;
  /// Domain-classifier learning rate as a multiple of `lr`.
  double dc_lr_scale = 1.0;
  bool use_fan = true;
  bool use_dc = true;
  /// Keeps the FAN networks at their initial (identity) state.
  bool freeze_fan = false;
  SegConfig seg;
  FanArch fan_arch;
  /// Every n-th sample of each source site is withheld from updates and used
  /// to measure domain accuracy.
  std::size_t domain_val_stride = 5;

  void validate() const {
    if (!(lr > 0.0)) throw UsageError("lr must be > 0");
    if (!(lr_decay_per_epoch >= 0.0 && lr_decay_per_epoch < 1.0)) {
      throw UsageError("lr_decay_per_epoch must lie in [0, 1)");
    }
    if (!(lambda >= 0.0)) throw UsageError("lambda must be >= 0");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (!(l2 >= 0.0)) throw UsageError("l2 must be >= 0");
    if (!(grad_clip >= 0.0)) throw UsageError("grad_clip must be >= 0");
    if (!(dc_lr_scale > 0.0)) throw UsageError("dc_lr_scale must be > 0");
    if (use_dc && !use_fan) throw UsageError("the domain classifier needs FAN (it consumes the FAN amplitude)");
    if (domain_val_stride == 1) throw UsageError("domain_val_stride of 1 leaves nothing to train on");
    validate_mask();
  }

  void validate_mask() const { fanfreq::validate(MaskSpec{alpha, 2, 2}); }

  /// Learning rate in effect during 1-based epoch e.
  double lr_at_epoch(std::size_t e) const {
    double r = lr;
    for (std::size_t i = 1; i < e; ++i) r *= 1.0 - lr_decay_per_epoch;
    return r;
  }
};

/// FAN + domain classifier + segmenter.
struct FanNet {
  FanModel fan;
  DomainClassifier dc;
  SegModel seg;

  /// Each sub-model draws from its own stream so that, for one seed, the
  /// segmenter starts identical whether or not FAN and DC are enabled.
  static FanNet create(const TrainConfig& cfg, std::size_t num_domains) {
    FanNet net;
    nn::Rng seg_rng(mix_seed(cfg.seed, 101));
    nn::Rng fan_rng(mix_seed(cfg.seed, 202));
    nn::Rng dc_rng(mix_seed(cfg.seed, 303));
    net.seg = SegModel(cfg.seg, seg_rng);
    net.fan = FanModel::create(cfg.alpha, cfg.fan_arch, fan_rng);
    net.dc = DomainClassifier(num_domains, dc_rng);
    return net;
  }

  nn::ParamList parameters() {
    nn::ParamList all = fan.parameters();
    for (auto& p : dc.parameters()) all.push_back(p);
    for (auto& p : seg.parameters()) all.push_back(p);
    return all;
  }
};

/// Forward results for one sample on one tape.
struct SampleForward {
  Var x_prime;
  Var pred;
  Var dice;
  std::optional<Var> logits;
  std::optional<Var> ce;
  std::size_t clamped = 0;
};

/// `with_ce` is false for samples whose site is unknown to the classifier.
inline SampleForward forward_sample(Tape& tape, FanNet& net, const SiteSample& sample,
                                    const TrainConfig& cfg, bool with_ce = true) {
  const RealPlane x = zscore(sample.image);
  SampleForward out;
  if (cfg.use_fan) {
    const FanOutput f = fan_forward(tape, net.fan, x);
    out.x_prime = ops::standardize(f.x_prime);
    out.clamped = f.clamped;
    if (cfg.use_dc) {
      out.logits = classify_domain(tape, net.dc, f.amp_combined);
      if (with_ce) out.ce = ops::softmax_cross_entropy(*out.logits, {sample.y_dom});
    }
  } else {
    out.x_prime = tape.constant(nn::image_tensor(x.vector(), x.height(), x.width()));
  }
  out.pred = segment(tape, net.seg, out.x_prime);
  out.dice = ops::soft_dice_loss(out.pred, sample.y_seg.vector());
  return out;
}

struct StepResult {
  double loss_total = 0.0;
  double loss_dice = 0.0;
  double loss_ce = 0.0;
  double grad_norm = 0.0;  ///< before clipping
  std::size_t clamped = 0;
};

/// Trainable parameters of one sub-model and its learning-rate multiplier.
struct ParamGroup {
  nn::ParamList params;
  double lr_scale = 1.0;
};

/// Sub-models that receive updates under `cfg`.
inline std::vector<ParamGroup> trainable_groups(FanNet& net, const TrainConfig& cfg) {
  std::vector<ParamGroup> out;
  if (cfg.use_fan && !cfg.freeze_fan) out.push_back({net.fan.parameters(), 1.0});
  if (cfg.use_dc) out.push_back({net.dc.parameters(), cfg.dc_lr_scale});
  out.push_back({net.seg.parameters(), 1.0});
  return out;
}

/// Parameters that receive updates under `cfg`.
inline nn::ParamList trainable_parameters(FanNet& net, const TrainConfig& cfg) {
  nn::ParamList out;
  for (const ParamGroup& g : trainable_groups(net, cfg)) {
    out.insert(out.end(), g.params.begin(), g.params.end());
  }
  return out;
}

/// Marks exactly the trainable parameters as requiring gradients.
inline void configure_gradients(FanNet& net, const TrainConfig& cfg) {
  nn::set_trainable(net.parameters(), false);
  nn::set_trainable(trainable_parameters(net, cfg), true);
}

/// Computes the batch-mean loss, back-propagates and applies one SGD step
/// with learning rate `lr`.
inline StepResult train_step(FanNet& net, std::span<const SiteSample> batch, const TrainConfig& cfg,
                             double lr) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  configure_gradients(net, cfg);
  nn::zero_grad(net.parameters());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const bool dc_term = cfg.use_dc && cfg.lambda != 0.0;
  StepResult r;
  for (const SiteSample& s : batch) {
    Tape tape;
    const SampleForward f = forward_sample(tape, net, s, cfg);
    const double dice = f.dice.item();
    const double ce = f.ce ? f.ce->item() : 0.0;
    if (!std::isfinite(dice)) throw NumericalError("train_step: loss_dice is not finite");
    if (!std::isfinite(ce)) throw NumericalError("train_step: loss_ce is not finite");
    Var loss = f.dice;
    if (dc_term) loss = ops::add(loss, ops::scale(*f.ce, cfg.lambda));
    tape.backward(loss, inv_n);
    r.loss_dice += dice * inv_n;
    r.loss_ce += ce * inv_n;
    r.clamped += f.clamped;
  }
  r.loss_total = r.loss_dice + (cfg.use_dc ? cfg.lambda * r.loss_ce : 0.0);
  double sq = 0.0;
  for (const ParamGroup& g : trainable_groups(net, cfg)) {
    const double norm = nn::clip_grad_norm(g.params, cfg.grad_clip);
    sq += norm * norm;
    nn::sgd_step(g.params, lr * g.lr_scale, cfg.l2);
  }
  r.grad_norm = std::sqrt(sq);
  return r;
}

struct EvalResult {
  SegMetrics metrics;     ///< per-image means
  double loss_dice = 0.0;
  double loss_ce = 0.0;
  std::optional<double> domain_acc;
};

/// Forward-only pass over `samples`. Domain loss and accuracy are computed
/// only when `domain_labels` says the samples carry training-site labels.
inline EvalResult evaluate(FanNet& net, std::span<const SiteSample> samples, const TrainConfig& cfg,
                           bool domain_labels = true) {
  EvalResult out;
  if (samples.empty()) return out;
  std::size_t hits = 0;
  for (const SiteSample& s : samples) {
    Tape tape;
    const SampleForward f = forward_sample(tape, net, s, cfg, domain_labels);
    const SegMetrics m = seg_metrics(f.pred.values(), s.y_seg.values());
    out.metrics.dice += m.dice;
    out.metrics.recall += m.recall;
    out.metrics.f1 += m.f1;
    out.loss_dice += f.dice.item();
    if (f.ce) {
      out.loss_ce += f.ce->item();
      hits += predicted_class(f.logits->values()) == s.y_dom ? 1 : 0;
    }
  }
  const double n = static_cast<double>(samples.size());
  out.metrics.dice /= n;
  out.metrics.recall /= n;
  out.metrics.f1 /= n;
  out.loss_dice /= n;
  out.loss_ce /= n;
  if (cfg.use_fan && cfg.use_dc && domain_labels) out.domain_acc = static_cast<double>(hits) / n;
  return out;
}

/// Domain accuracy of the classifier on (sample, label) pairs.
inline double domain_accuracy(FanNet& net, std::span<const SiteSample> samples,
                              const TrainConfig& cfg) {
  if (samples.empty()) throw UsageError("domain_accuracy: empty batch");
  TrainConfig c = cfg;
  c.use_fan = c.use_dc = true;
  return *evaluate(net, samples, c).domain_acc;
}

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_dice = 0.0;
  double loss_ce = 0.0;
  double domain_acc = std::numeric_limits<double>::quiet_NaN();
  double test_dice = 0.0;
  double test_recall = 0.0;
  double test_f1 = 0.0;
};

struct TrainReport {
  std::vector<EpochRow> rows;
  std::size_t clamped_bins = 0;  ///< negative adjusted amplitudes clamped during training

  const EpochRow& final_row() const { return rows.back(); }
};

/// Splits source samples into an update set and a domain-accuracy slice.
inline void split_domain_validation(std::span<const SiteSample> train, std::size_t stride,
                                    std::vector<SiteSample>& fit, std::vector<SiteSample>& val) {
  for (const SiteSample& s : train) {
    if (stride > 1 && s.index % stride == stride - 1) {
      val.push_back(s);
    } else {
      fit.push_back(s);
    }
  }
}

/// Fisher-Yates with a 64-bit Mersenne Twister; portable across standard
/// libraries.
inline void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed) {
  nn::Rng rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

using EpochCallback = std::function<void(const EpochRow&)>;

/// Epoch loop over a leave-one-site-out split. Row 0 evaluates the untrained
/// model; row e reports the mean training losses of epoch e and the
/// evaluation after it.
inline TrainReport run_training(FanNet& net, const LosoSplit& split, const TrainConfig& cfg,
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (split.train.empty() || split.test.empty()) throw UsageError("run_training: empty split");
  if (cfg.use_dc && net.dc.num_domains() != split.train_sites.size()) {
    throw UsageError("domain classifier has " + std::to_string(net.dc.num_domains()) +
                     " outputs but the split has " + std::to_string(split.train_sites.size()) +
                     " training sites");
  }
  std::vector<SiteSample> fit, val;
  split_domain_validation(split.train, cfg.domain_val_stride, fit, val);
  if (fit.empty()) throw UsageError("run_training: no samples left for updates");

  TrainReport report;
  auto emit = [&](EpochRow row) {
    if (on_epoch) on_epoch(row);
    report.rows.push_back(row);
  };

  auto evaluate_into = [&](EpochRow& row) {
    const EvalResult test = evaluate(net, split.test, cfg, false);
    row.test_dice = test.metrics.dice;
    row.test_recall = test.metrics.recall;
    row.test_f1 = test.metrics.f1;
    if (cfg.use_dc && !val.empty()) row.domain_acc = *evaluate(net, val, cfg).domain_acc;
  };

  {
    EpochRow row;
    row.lr = cfg.lr;
    const EvalResult v = evaluate(net, val.empty() ? std::span<const SiteSample>(fit) : val, cfg);
    row.loss_dice = v.loss_dice;
    row.loss_ce = cfg.use_dc ? v.loss_ce : 0.0;
    row.loss_total = row.loss_dice + (cfg.use_dc ? cfg.lambda * row.loss_ce : 0.0);
    evaluate_into(row);
    emit(row);
  }

  std::vector<std::size_t> order(fit.size());
  std::vector<SiteSample> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_indices(order, mix_seed(cfg.seed, 1000 + epoch));
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        batch.push_back(fit[order[i]]);
      }
      const StepResult r = train_step(net, batch, cfg, lr);
      const double w = static_cast<double>(batch.size()) / static_cast<double>(fit.size());
      row.loss_total += r.loss_total * w;
      row.loss_dice += r.loss_dice * w;
      row.loss_ce += r.loss_ce * w;
      report.clamped_bins += r.clamped;
    }
    evaluate_into(row);
    emit(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Curves CSV and checkpoints

inline constexpr const char* kCurvesHeader =
    "epoch,lr,loss_total,loss_dice,loss_ce,domain_acc,test_dice,test_recall,test_f1";

/// Shortest round-trip decimal, '.' separator regardless of locale.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_curves_csv(std::ostream& out, const TrainReport& report) {
  out << kCurvesHeader << '\n';
  for (const auto& r : report.rows) {
    out << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.loss_total) << ','
        << format_double(r.loss_dice) << ',' << format_double(r.loss_ce) << ','
        << format_double(r.domain_acc) << ',' << format_double(r.test_dice) << ','
        << format_double(r.test_recall) << ',' << format_double(r.test_f1) << '\n';
  }
}

inline void write_curves_csv(const std::filesystem::path& path, const TrainReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_curves_csv(out, report);
}

/// Checkpoint directory: one <name>.fant per parameter plus manifest.txt
/// holding "alpha = <value>" and one "param <name> <dims...> <file>" line per
/// tensor.
inline void save_checkpoint(const std::filesystem::path& dir, FanNet& net, double alpha) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.txt").string());
  manifest << "alpha = " << format_double(alpha) << '\n';
  for (const auto& p : net.parameters()) {
    const std::string file = p.name + ".fant";
    io::save_fant(dir / file, *p.tensor);
    manifest << "param " << p.name;
    for (std::size_t d : p.tensor->shape) manifest << ' ' << d;
    manifest << ' ' << file << '\n';
  }
  if (!manifest) throw IoError("checkpoint manifest write failed");
}

/// Loads parameters into an already-constructed network of matching shape;
/// returns the stored alpha.
inline double load_checkpoint(const std::filesystem::path& dir, FanNet& net) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot open " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> files;
  double alpha = std::numeric_limits<double>::quiet_NaN();
  std::string line;
  while (std::getline(manifest, line)) {
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "alpha") {
      std::string eq;
      in >> eq >> alpha;
    } else if (kind == "param") {
      std::string name, tok, last;
      in >> name;
      while (in >> tok) last = tok;
      files[name] = last;
    }
  }
  for (const auto& p : net.parameters()) {
    const auto it = files.find(p.name);
    if (it == files.end()) throw IoError("checkpoint lacks parameter " + p.name);
    Tensor t = io::load_fant(dir / it->second);
    if (t.shape != p.tensor->shape) {
      throw IoError("checkpoint parameter " + p.name + " has shape " + shape_string(t.shape) +
                    ", model expects " + shape_string(p.tensor->shape));
    }
    p.tensor->values = std::move(t.values);
  }
  return alpha;
}

}  // namespace fanfreq
