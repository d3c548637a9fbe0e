#pragma once

// Experiment drivers: configuration files, the finite-difference gradient
// suite, leave-one-site-out runs, the alpha sweep and the full rotation.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fanfreq/data.hpp"
#include "fanfreq/error.hpp"
#include "fanfreq/trainer.hpp"

namespace fanfreq {

// ---------------------------------------------------------------------------
// Configuration

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw UsageError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "on" || text == "true" || text == "1" || text == "yes") return true;
  if (text == "off" || text == "false" || text == "0" || text == "no") return false;
  throw UsageError("config key '" + key + "': expected on/off, got '" + text + "'");
}

}  // namespace detail

/// Flat `key = value` lines; '#' starts a comment.
inline ConfigMap parse_config(std::istream& in) {
  ConfigMap out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw UsageError("config line " + std::to_string(line_no) + ": empty key or value");
    }
    out[key] = value;
  }
  return out;
}

inline ConfigMap load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

/// Applies recognised keys onto `cfg`; unknown keys are rejected.
inline void apply_config(const ConfigMap& map, TrainConfig& cfg) {
  using detail::parse_bool;
  using detail::parse_number;
  for (const auto& [key, value] : map) {
    if (key == "lr") cfg.lr = parse_number<double>(key, value);
    else if (key == "lr_decay_per_epoch") cfg.lr_decay_per_epoch = parse_number<double>(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "epochs") cfg.epochs = parse_number<std::size_t>(key, value);
    else if (key == "lambda") cfg.lambda = parse_number<double>(key, value);
    else if (key == "alpha") cfg.alpha = parse_number<double>(key, value);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "l2") cfg.l2 = parse_number<double>(key, value);
    else if (key == "grad_clip") cfg.grad_clip = parse_number<double>(key, value);
    else if (key == "dc_lr_scale") cfg.dc_lr_scale = parse_number<double>(key, value);
    else if (key == "freeze_fan") cfg.freeze_fan = parse_bool(key, value);
    else if (key == "depth") cfg.seg.depth = parse_number<std::size_t>(key, value);
    else if (key == "base_channels") cfg.seg.base_channels = parse_number<std::size_t>(key, value);
    else if (key == "fan_hidden") cfg.fan_arch.hidden = parse_number<std::size_t>(key, value);
    else if (key == "domain_val_stride") cfg.domain_val_stride = parse_number<std::size_t>(key, value);
    else throw UsageError("unknown config key '" + key + "'");
  }
}

// ---------------------------------------------------------------------------
// Gradient-check suite

/// Analytic and finite-difference gradients over the same coordinates.
struct GradComparison {
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// max |a - n| / max(max |a|, max |n|); the absolute error when both vanish.
inline double max_relative_error(const GradComparison& c) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < c.analytic.size(); ++i) {
    diff = std::max(diff, std::abs(c.analytic[i] - c.numeric[i]));
    scale = std::max({scale, std::abs(c.analytic[i]), std::abs(c.numeric[i])});
  }
  return scale > 0.0 ? diff / scale : diff;
}

struct GradCase {
  std::string name;
  double tolerance = 1e-4;
  std::function<GradComparison(std::uint64_t seed)> run;
};

struct GradResult {
  std::string name;
  double max_rel_error = 0.0;  ///< worst over seeds
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

using OpBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares d/dinputs of sum(out * r) for a fixed random r.
inline GradComparison compare_op(const std::vector<Tensor>& inputs, const OpBuilder& build,
                                 std::uint64_t seed) {
  std::vector<double> r;
  auto objective = [&](const std::vector<Tensor>& xs, bool differentiate,
                       GradComparison* sink) -> double {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(differentiate ? tape.leaf(x) : tape.constant(x));
    const Var out = build(tape, vars);
    if (r.empty()) {
      nn::Rng rng(seed ^ 0x5bd1e995ull);
      std::uniform_real_distribution<double> d(-1.0, 1.0);
      r.resize(out.numel());
      for (double& v : r) v = d(rng);
    }
    const Var loss = ops::sum(ops::mul_const(out, r));
    if (differentiate) {
      tape.backward(loss);
      for (const Var& v : vars) {
        const auto& g = tape.grad(v);
        if (g.empty()) {
          sink->analytic.insert(sink->analytic.end(), v.numel(), 0.0);
        } else {
          sink->analytic.insert(sink->analytic.end(), g.begin(), g.end());
        }
      }
    }
    return loss.item();
  };

  GradComparison c;
  objective(inputs, true, &c);
  std::vector<Tensor> xs = inputs;
  for (auto& x : xs) {
    for (double& v : x.values) {
      const double keep = v;
      v = keep + kFiniteDifferenceStep;
      const double up = objective(xs, false, nullptr);
      v = keep - kFiniteDifferenceStep;
      const double down = objective(xs, false, nullptr);
      v = keep;
      c.numeric.push_back((up - down) / (2.0 * kFiniteDifferenceStep));
    }
  }
  return c;
}

/// Compares d(loss)/d(params) where `loss` reads the parameters through
/// Tape::parameter.
inline GradComparison compare_params(const nn::ParamList& params,
                                     const std::function<Var(Tape&)>& loss_fn) {
  GradComparison c;
  nn::set_trainable(params, true);
  nn::zero_grad(params);
  {
    Tape tape;
    tape.backward(loss_fn(tape));
  }
  for (const auto& p : params) {
    if (p.tensor->has_grad()) {
      c.analytic.insert(c.analytic.end(), p.tensor->grad.begin(), p.tensor->grad.end());
    } else {
      c.analytic.insert(c.analytic.end(), p.tensor->numel(), 0.0);
    }
  }
  auto value = [&] {
    Tape tape;
    return loss_fn(tape).item();
  };
  for (const auto& p : params) {
    for (double& v : p.tensor->values) {
      const double keep = v;
      v = keep + kFiniteDifferenceStep;
      const double up = value();
      v = keep - kFiniteDifferenceStep;
      const double down = value();
      v = keep;
      c.numeric.push_back((up - down) / (2.0 * kFiniteDifferenceStep));
    }
  }
  return c;
}

/// Convolution entry point used by the suite; replaceable so a broken kernel
/// can be fed through the same checks.
using ConvFn = std::function<Var(Var, Var, Var, std::size_t, std::size_t)>;

namespace detail {

inline Tensor random_tensor(Shape shape, nn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values) v = d(rng);
  return t;
}

/// Random values bounded away from zero, for ops with a kink at 0.
inline Tensor random_away_from_zero(Shape shape, nn::Rng& rng) {
  std::uniform_real_distribution<double> d(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (double& v : t.values) v = sign(rng) ? d(rng) : -d(rng);
  return t;
}

/// Randomizes every parameter so zero-initialized heads do not hide paths.
inline void perturb(const nn::ParamList& params, nn::Rng& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (const auto& p : params) {
    for (double& v : p.tensor->values) v += d(rng);
  }
}

}  // namespace detail

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kLinearOpTolerance = 1e-6;
inline constexpr double kEndToEndTolerance = 1e-3;

/// Every differentiable op plus the end-to-end FAN and classifier paths.
inline std::vector<GradCase> default_grad_cases(ConvFn conv = ops::conv2d) {
  using detail::random_away_from_zero;
  using detail::random_tensor;
  std::vector<GradCase> cases;
  auto op_case = [&cases](std::string name, double tol,
                          std::function<std::vector<Tensor>(nn::Rng&)> make, OpBuilder build) {
    cases.push_back({std::move(name), tol, [make, build](std::uint64_t seed) {
                       nn::Rng rng(seed);
                       return compare_op(make(rng), build, seed);
                     }});
  };

  op_case("add", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({3, 4}, g), random_tensor({3, 4}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); });
  op_case("sub", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({3, 4}, g), random_tensor({3, 4}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::sub(v[0], v[1]); });
  op_case("mul", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({3, 4}, g), random_tensor({3, 4}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); });
  op_case("scale", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({2, 5}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::scale(v[0], -1.7); });
  op_case("mul_scalar", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({2, 5}, g), random_tensor({1}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::mul_scalar(v[0], v[1]); });
  op_case("add_scalar", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({2, 5}, g), random_tensor({1}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::add_scalar(v[0], v[1]); });
  op_case("relu", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_away_from_zero({4, 6}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::relu(v[0]); });
  op_case("sigmoid", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({4, 6}, g, -3.0, 3.0)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::sigmoid(v[0]); });
  op_case("log1p", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({4, 6}, g, 0.0, 5.0)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::log1p(v[0]); });
  // The reversal is checked against the negated finite difference.
  cases.push_back({"grad_reverse", kLinearOpTolerance, [](std::uint64_t seed) {
                     nn::Rng rng(seed);
                     GradComparison c = compare_op({random_tensor({3, 3}, rng)},
                                                   [](Tape&, const std::vector<Var>& v) {
                                                     return ops::grad_reverse(v[0]);
                                                   },
                                                   seed);
                     for (double& n : c.numeric) n = -n;
                     return c;
                   }});
  op_case("global_avg_pool", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({2, 3, 4, 5}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::global_avg_pool(v[0]); });
  op_case("conv2d", kOpTolerance,
          [](nn::Rng& g) {
            return std::vector{random_tensor({1, 2, 5, 5}, g), random_tensor({3, 2, 3, 3}, g),
                               random_tensor({3}, g)};
          },
          [conv](Tape&, const std::vector<Var>& v) { return conv(v[0], v[1], v[2], 1, 1); });
  op_case("conv2d_stride2", kOpTolerance,
          [](nn::Rng& g) {
            return std::vector{random_tensor({2, 2, 6, 7}, g), random_tensor({4, 2, 3, 3}, g),
                               random_tensor({4}, g)};
          },
          [conv](Tape&, const std::vector<Var>& v) { return conv(v[0], v[1], v[2], 2, 1); });
  op_case("linear", kOpTolerance,
          [](nn::Rng& g) {
            return std::vector{random_tensor({2, 5}, g), random_tensor({3, 5}, g), random_tensor({3}, g)};
          },
          [](Tape&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); });
  op_case("max_pool2d", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({1, 2, 4, 6}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::max_pool2d(v[0]); });
  op_case("upsample2x", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({1, 2, 3, 2}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::upsample2x(v[0]); });
  op_case("concat_channels", kLinearOpTolerance,
          [](nn::Rng& g) {
            return std::vector{random_tensor({2, 1, 3, 3}, g), random_tensor({2, 2, 3, 3}, g)};
          },
          [](Tape&, const std::vector<Var>& v) { return ops::concat_channels(v[0], v[1]); });
  op_case("standardize", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({1, 1, 4, 5}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::standardize(v[0]); });
  op_case("fftshift", kLinearOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({1, 1, 5, 4}, g)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::fftshift(v[0]); });
  op_case("softmax_cross_entropy", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({3, 4}, g, -2.0, 2.0)}; },
          [](Tape&, const std::vector<Var>& v) { return ops::softmax_cross_entropy(v[0], {2, 4, 1}); });
  op_case("soft_dice_loss", kOpTolerance,
          [](nn::Rng& g) { return std::vector{random_tensor({1, 1, 4, 4}, g, 0.0, 1.0)}; },
          [](Tape&, const std::vector<Var>& v) {
            std::vector<double> target(16, 0.0);
            for (std::size_t i : {1u, 2u, 5u, 6u, 11u}) target[i] = 1.0;
            return ops::soft_dice_loss(v[0], target);
          });
  op_case("spectrum_recombine", kOpTolerance,
          [](nn::Rng& g) {
            // Point-symmetric amplitude, as produced by a real image.
            Tensor a = random_tensor({1, 1, 8, 8}, g, 0.0, 2.0);
            for (std::size_t u = 0; u < 8; ++u) {
              for (std::size_t v = 0; v < 8; ++v) a.values[u * 8 + v] = a.values[((8 - u) % 8) * 8 + (8 - v) % 8];
            }
            return std::vector{a};
          },
          [](Tape&, const std::vector<Var>& v) {
            // Phase of a real image keeps the synthesized output real.
            nn::Rng ph(7);
            RealPlane img(8, 8);
            std::uniform_real_distribution<double> d(0.0, 1.0);
            for (double& x : img.values()) x = d(ph);
            return ops::spectrum_recombine(v[0], decompose(dft2(img)).phase);
          });

  cases.push_back({"fan_end_to_end", kEndToEndTolerance, [](std::uint64_t seed) {
                     nn::Rng rng(seed);
                     FanModel model = FanModel::create(0.1, FanArch{}, rng);
                     detail::perturb(model.parameters(), rng, 0.05);
                     RealPlane image(16, 16);
                     std::uniform_real_distribution<double> d(0.0, 1.0);
                     for (double& v : image.values()) v = d(rng);
                     std::vector<double> weights(image.size());
                     for (double& v : weights) v = d(rng);
                     return compare_params(model.parameters(), [&](Tape& tape) {
                       const Var x = ops::standardize(fan_forward(tape, model, image).x_prime);
                       return ops::sum(ops::mul_const(x, weights));
                     });
                   }});
  cases.push_back({"domain_classifier_end_to_end", kEndToEndTolerance, [](std::uint64_t seed) {
                     nn::Rng rng(seed);
                     FanModel model = FanModel::create(0.1, FanArch{}, rng);
                     DomainClassifier dc(3, rng);
                     nn::ParamList params = model.parameters();
                     for (auto& p : dc.parameters()) params.push_back(p);
                     detail::perturb(params, rng, 0.05);
                     RealPlane image(16, 16);
                     std::uniform_real_distribution<double> d(0.0, 1.0);
                     for (double& v : image.values()) v = d(rng);
                     // Without reversal, so analytic and numeric derivatives share a sign.
                     return compare_params(params, [&](Tape& tape) {
                       const FanOutput f = fan_forward(tape, model, image);
                       return ops::softmax_cross_entropy(dc(tape, f.amp_combined, false), {2});
                     });
                   }});
  return cases;
}

inline std::vector<GradResult> run_gradcheck(const std::vector<GradCase>& cases,
                                             const std::vector<std::uint64_t>& seeds = {1, 2, 3}) {
  std::vector<GradResult> out;
  for (const GradCase& c : cases) {
    GradResult r{c.name, 0.0, c.tolerance};
    for (std::uint64_t seed : seeds) {
      r.max_rel_error = std::max(r.max_rel_error, max_relative_error(c.run(seed)));
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parallel sweeps

/// Worker count: FANFREQ_THREADS if set and positive, else the hardware
/// concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("FANFREQ_THREADS")) {
    std::size_t n = 0;
    const auto res = std::from_chars(env, env + std::char_traits<char>::length(env), n);
    if (res.ec == std::errc{} && n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(0..n-1) on up to `threads` workers; the first exception is
/// rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Leave-one-site-out experiments

enum class Mode { kBaseline, kFan, kFanDc };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kBaseline: return "baseline";
    case Mode::kFan: return "fan";
    case Mode::kFanDc: return "fan+dc";
  }
  return "?";
}

/// Mode from the --fan / --dc switches.
inline Mode mode_from_flags(bool fan, bool dc) {
  if (dc && !fan) throw UsageError("--dc on requires --fan on: the classifier consumes FAN's amplitude");
  if (!fan) return Mode::kBaseline;
  return dc ? Mode::kFanDc : Mode::kFan;
}

inline TrainConfig configure_mode(TrainConfig cfg, Mode mode) {
  cfg.use_fan = mode != Mode::kBaseline;
  cfg.use_dc = mode == Mode::kFanDc;
  if (!cfg.use_dc) cfg.lambda = 0.0;
  return cfg;
}

struct LosoResult {
  Mode mode = Mode::kBaseline;
  int held_out = 0;
  double alpha = 0.0;
  TrainReport report;
  EpochRow final;
};

inline constexpr const char* kMetricsHeader = "mode,held_out,alpha,dice,recall,f1,domain_acc";

inline void write_metrics_row(std::ostream& out, const LosoResult& r) {
  out << mode_name(r.mode) << ',' << r.held_out << ',' << format_double(r.alpha) << ','
      << format_double(r.final.test_dice) << ',' << format_double(r.final.test_recall) << ','
      << format_double(r.final.test_f1) << ',' << format_double(r.final.domain_acc) << '\n';
}

/// One training run with `held_out` as the unseen site. When `out_dir` is
/// non-empty, writes curves.csv, metrics.csv and checkpoint/ there.
inline LosoResult run_loso(const MultiSiteDataset& ds, int held_out, Mode mode, const TrainConfig& base,
                           const std::filesystem::path& out_dir = {}, const EpochCallback& on_epoch = {}) {
  const TrainConfig cfg = configure_mode(base, mode);
  cfg.validate();
  const LosoSplit split = leave_one_site_out(ds, held_out);
  FanNet net = FanNet::create(cfg, split.train_sites.size());
  LosoResult r;
  r.mode = mode;
  r.held_out = held_out;
  r.alpha = cfg.alpha;
  r.report = run_training(net, split, cfg, on_epoch);
  r.final = r.report.final_row();
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_curves_csv(out_dir / "curves.csv", r.report);
    std::ofstream metrics(out_dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
    metrics << kMetricsHeader << '\n';
    write_metrics_row(metrics, r);
    save_checkpoint(out_dir / "checkpoint", net, cfg.alpha);
  }
  return r;
}

struct AlphaRow {
  double alpha = 0.0;
  std::optional<LosoResult> result;
  std::string error;  ///< set when the run failed
};

/// FAN+DC runs at each alpha on one held-out site. A failing alpha is recorded
/// and the sweep continues.
inline std::vector<AlphaRow> ablate_alpha(const MultiSiteDataset& ds, int held_out,
                                          const std::vector<double>& alphas, const TrainConfig& base,
                                          const std::filesystem::path& out_dir = {},
                                          std::size_t threads = worker_threads()) {
  std::vector<AlphaRow> rows(alphas.size());
  parallel_for(alphas.size(), threads, [&](std::size_t i) {
    rows[i].alpha = alphas[i];
    try {
      TrainConfig cfg = base;
      cfg.alpha = alphas[i];
      const auto dir = out_dir.empty() ? out_dir : out_dir / ("alpha_" + format_double(alphas[i]));
      rows[i].result = run_loso(ds, held_out, Mode::kFanDc, cfg, dir);
    } catch (const std::exception& e) {
      rows[i].error = e.what();
    }
  });
  return rows;
}

inline void write_alpha_csv(std::ostream& out, const std::vector<AlphaRow>& rows) {
  out << "alpha,dice,recall,f1,status\n";
  for (const auto& r : rows) {
    out << format_double(r.alpha) << ',';
    if (r.result) {
      out << format_double(r.result->final.test_dice) << ',' << format_double(r.result->final.test_recall)
          << ',' << format_double(r.result->final.test_f1) << ",ok\n";
    } else {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      out << "nan,nan,nan,failed: " << msg << '\n';
    }
  }
}

inline void write_alpha_markdown(std::ostream& out, const std::vector<AlphaRow>& rows) {
  out << "| alpha | Dice | Recall | F1 |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    out << "| " << format_double(r.alpha) << " | ";
    if (r.result) {
      out << format_double(r.result->final.test_dice) << " | " << format_double(r.result->final.test_recall)
          << " | " << format_double(r.result->final.test_f1) << " |\n";
    } else {
      out << "failed | failed | failed |\n";
    }
  }
}

/// Every (held-out site, mode) pair; results are ordered by site, then by
/// the order of `modes`.
inline std::vector<LosoResult> run_rotation(const MultiSiteDataset& ds, const std::vector<Mode>& modes,
                                            const TrainConfig& base, std::size_t threads = worker_threads()) {
  const auto k = ds.num_sites();
  std::vector<LosoResult> out(k * modes.size());
  parallel_for(out.size(), threads, [&](std::size_t i) {
    const int held_out = static_cast<int>(i / modes.size()) + 1;
    out[i] = run_loso(ds, held_out, modes[i % modes.size()], base);
  });
  return out;
}

/// Mean held-out Dice per mode over a rotation.
inline std::map<Mode, double> mean_dice_by_mode(const std::vector<LosoResult>& runs) {
  std::map<Mode, double> sum;
  std::map<Mode, std::size_t> count;
  for (const auto& r : runs) {
    sum[r.mode] += r.final.test_dice;
    ++count[r.mode];
  }
  for (auto& [m, s] : sum) s /= static_cast<double>(count[m]);
  return sum;
}

}  // namespace fanfreq
