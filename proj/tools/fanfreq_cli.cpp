// fanfreq command-line front end.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fanfreq/data.hpp"
#include "fanfreq/error.hpp"
#include "fanfreq/fourier.hpp"
#include "fanfreq/harness.hpp"
#include "fanfreq/pgm.hpp"
#include "fanfreq/trainer.hpp"

namespace fs = std::filesystem;
using namespace fanfreq;

namespace {

struct TrainFlags {
  std::string config;
  std::optional<double> lr, lambda, alpha, l2, grad_clip, dc_lr_scale;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "key = value configuration file");
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--batch-size", batch_size, "mini-batch size");
    cmd->add_option("--lambda", lambda, "weight of the domain cross-entropy");
    cmd->add_option("--alpha", alpha, "low-frequency mask ratio");
    cmd->add_option("--l2", l2, "L2 coefficient per SGD step");
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_option("--grad-clip", grad_clip, "per-model gradient-norm clip (0 = off)");
    cmd->add_option("--dc-lr-scale", dc_lr_scale, "domain classifier learning-rate multiplier");
  }

  /// Defaults, then the config file, then explicit flags.
  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config.empty()) apply_config(load_config(config), cfg);
    if (lr) cfg.lr = *lr;
    if (epochs) cfg.epochs = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (lambda) cfg.lambda = *lambda;
    if (alpha) cfg.alpha = *alpha;
    if (l2) cfg.l2 = *l2;
    if (seed) cfg.seed = *seed;
    if (grad_clip) cfg.grad_clip = *grad_clip;
    if (dc_lr_scale) cfg.dc_lr_scale = *dc_lr_scale;
    return cfg;
  }
};

bool on_off(const std::string& flag, const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UsageError(flag + " expects on or off, got '" + v + "'");
}

void print_row(const EpochRow& r) {
  std::cout << "epoch " << r.epoch << "  lr " << format_double(r.lr) << "  dice_loss "
            << std::setprecision(4) << r.loss_dice << "  ce " << r.loss_ce << "  dom_acc "
            << r.domain_acc << "  test_dice " << r.test_dice << std::endl;
}

int cmd_style_swap(const std::string& target, const std::string& source, double alpha,
                   const std::string& out, std::string panel) {
  validate(MaskSpec{alpha, 2, 2});
  const io::PgmImage a = io::load_pgm(target);
  const io::PgmImage b = io::load_pgm(source);
  const RealPlane result = amplitude_swap(a.pixels, b.pixels, alpha);
  const unsigned bits = a.maxval > 255 ? 16 : 8;
  io::save_pgm(out, result, bits);

  const std::size_t h = result.height(), w = result.width();
  RealPlane mosaic(h, 3 * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      mosaic(y, x) = a.pixels(y, x);
      mosaic(y, w + x) = b.pixels(y, x);
      mosaic(y, 2 * w + x) = result(y, x);
    }
  }
  if (panel.empty()) {
    fs::path p(out);
    panel = (p.parent_path() / (p.stem().string() + "_panel.pgm")).string();
  }
  io::save_pgm(panel, mosaic, bits);

  const RealPlane mask = build_mask({alpha, h, w});
  const double m_src = mean_masked(decompose(dft2(b.pixels)).amplitude, mask);
  const double m_out = mean_masked(decompose(dft2(result)).amplitude, mask);
  std::cout << "wrote " << out << " and " << panel << "\n"
            << "mean masked amplitude: source " << m_src << ", result " << m_out << "\n";
  return 0;
}

int cmd_loso(const std::string& data, int held_out, const TrainFlags& flags, const std::string& out,
             const std::string& fan, const std::string& dc, bool quiet) {
  const Mode mode = mode_from_flags(on_off("--fan", fan), on_off("--dc", dc));
  const TrainConfig cfg = flags.resolve();
  const MultiSiteDataset ds = read_dataset(data);
  EpochCallback cb;
  if (!quiet) cb = print_row;
  const LosoResult r = run_loso(ds, held_out, mode, cfg, out, cb);
  std::cout << kMetricsHeader << '\n';
  write_metrics_row(std::cout, r);
  return 0;
}

int cmd_ablate(const std::string& data, const std::vector<double>& alphas, int held_out,
               const TrainFlags& flags, const std::string& out) {
  const TrainConfig cfg = flags.resolve();
  const MultiSiteDataset ds = read_dataset(data);
  if (held_out == 0) held_out = static_cast<int>(ds.num_sites());
  const auto rows = ablate_alpha(ds, held_out, alphas, cfg, out);
  if (!out.empty()) {
    std::ofstream csv(fs::path(out) / "alpha_table.csv", std::ios::binary);
    std::ofstream md(fs::path(out) / "alpha_table.md", std::ios::binary);
    if (!csv || !md) throw IoError("cannot write alpha tables under " + out);
    write_alpha_csv(csv, rows);
    write_alpha_markdown(md, rows);
  }
  write_alpha_markdown(std::cout, rows);
  for (const auto& r : rows) {
    if (!r.error.empty()) std::cerr << "alpha " << r.alpha << " failed: " << r.error << '\n';
  }
  return 0;
}

int cmd_gradcheck() {
  const auto results = run_gradcheck(default_grad_cases());
  bool ok = true;
  for (const auto& r : results) {
    std::cout << std::left << std::setw(30) << r.name << " max_rel_err " << std::scientific
              << std::setprecision(3) << r.max_rel_error << "  tol " << r.tolerance << "  "
              << (r.passed() ? "ok" : "FAIL") << '\n';
    ok = ok && r.passed();
  }
  if (!ok) throw NumericalError("gradient check failed");
  return 0;
}

int cmd_gen_data(std::size_t sites, std::size_t n, std::size_t size, std::uint64_t seed,
                 const std::string& out) {
  const MultiSiteDataset ds = generate_dataset(site_styles(sites), n, seed, size);
  write_dataset(out, ds);
  std::cout << "wrote " << ds.total() << " samples to " << out << "\n"
            << "probe site accuracy " << probe_site_accuracy(ds) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fourier-based adaptive normalization toolkit"};
  app.require_subcommand(1);

  auto* swap = app.add_subcommand("style-swap", "swap low-frequency amplitude from source into target");
  std::string target, source, swap_out, panel;
  double swap_alpha = 0.1;
  swap->add_option("--target", target, "target PGM")->required();
  swap->add_option("--source", source, "source PGM")->required();
  swap->add_option("--alpha", swap_alpha, "mask ratio in (0, 0.5)");
  swap->add_option("--out", swap_out, "output PGM")->required();
  swap->add_option("--panel", panel, "3-panel mosaic (default <out>_panel.pgm)");

  auto* loso = app.add_subcommand("loso", "leave-one-site-out training run");
  std::string loso_data, loso_out, fan = "on", dc = "on";
  int held_out = 0;
  bool quiet = false;
  TrainFlags loso_flags;
  loso->add_option("--data", loso_data, "dataset directory")->required();
  loso->add_option("--hold-out", held_out, "held-out site id")->required();
  loso->add_option("--out", loso_out, "run directory")->required();
  loso->add_option("--fan", fan, "on|off");
  loso->add_option("--dc", dc, "on|off");
  loso->add_flag("--quiet", quiet, "no per-epoch output");
  loso_flags.add_to(loso);

  auto* ablate = app.add_subcommand("ablate-alpha", "FAN+DC runs over several mask ratios");
  std::string ablate_data, ablate_out;
  std::vector<double> alphas{0.05, 0.10, 0.15, 0.20};
  int ablate_hold = 0;
  TrainFlags ablate_flags;
  ablate->add_option("--data", ablate_data, "dataset directory")->required();
  ablate->add_option("--alphas", alphas, "comma-separated ratios")->delimiter(',');
  ablate->add_option("--hold-out", ablate_hold, "held-out site id (default: last)");
  ablate->add_option("--out", ablate_out, "output directory");
  ablate_flags.add_to(ablate);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic multi-site dataset");
  std::size_t sites = 4, n = 200, size = 64;
  std::uint64_t seed = 42;
  std::string gen_out;
  gen->add_option("--sites", sites, "number of sites");
  gen->add_option("--n", n, "samples per site");
  gen->add_option("--size", size, "image side length");
  gen->add_option("--seed", seed, "random seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*swap) return cmd_style_swap(target, source, swap_alpha, swap_out, panel);
    if (*loso) return cmd_loso(loso_data, held_out, loso_flags, loso_out, fan, dc, quiet);
    if (*ablate) return cmd_ablate(ablate_data, alphas, ablate_hold, ablate_flags, ablate_out);
    if (*grad) return cmd_gradcheck();
    if (*gen) return cmd_gen_data(sites, n, size, seed, gen_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
