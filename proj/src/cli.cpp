#include "dart/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>

#include "dart/experiments.hpp"
#include "dart/metrics.hpp"

namespace dart {

namespace fs = std::filesystem;

namespace {

// Bad input the user can fix by editing the command line or config file.
struct UsageError : Error {
  using Error::Error;
};

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  try {
    return load_run_config(path);
  } catch (const ConfigError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string::npos ? s.size() : comma;
    if (end > start) out.push_back(s.substr(start, end - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

bool is_pnm(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

// Degraded/clean pairs matched by file name; single files pair directly.
std::vector<std::pair<fs::path, fs::path>> image_pairs(const fs::path& degraded, const fs::path& clean) {
  std::vector<std::pair<fs::path, fs::path>> out;
  if (fs::is_regular_file(degraded)) {
    if (!fs::is_regular_file(clean)) throw Error("--clean must be a file when --degraded is a file");
    out.emplace_back(degraded, clean);
    return out;
  }
  if (!fs::is_directory(degraded)) throw Error("no such file or directory: " + degraded.string());
  if (!fs::is_directory(clean)) throw Error("--clean must be a directory when --degraded is a directory");
  for (const auto& entry : fs::directory_iterator(degraded)) {
    if (!entry.is_regular_file() || !is_pnm(entry.path())) continue;
    const fs::path ref = clean / entry.path().filename();
    if (!fs::is_regular_file(ref)) throw Error("no clean counterpart for " + entry.path().filename().string());
    out.emplace_back(entry.path(), ref);
  }
  if (out.empty()) throw Error("no .pgm/.ppm images in " + degraded.string());
  std::sort(out.begin(), out.end());
  return out;
}

fs::path loss_csv_path(const fs::path& ckpt) {
  fs::path p = ckpt;
  return p.replace_extension(".loss.csv");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DART image restoration toolkit", "dart_cli"};
  app.require_subcommand(1);

  // degrade
  auto* degrade = app.add_subcommand("degrade", "Add Gaussian noise or bicubic-resample a PGM/PPM image");
  std::string deg_in, deg_out, deg_mode = "down";
  std::optional<double> deg_sigma;
  std::optional<std::size_t> deg_scale;
  std::uint64_t deg_seed = 0;
  degrade->add_option("--in", deg_in, "input image")->required();
  degrade->add_option("--out", deg_out, "output image")->required();
  auto* o_sigma = degrade->add_option("--sigma", deg_sigma, "AWGN sigma on the 0-255 scale");
  auto* o_scale = degrade->add_option("--scale", deg_scale, "bicubic factor (2, 3 or 4)");
  o_sigma->excludes(o_scale);
  degrade->add_option("--seed", deg_seed, "noise seed")->capture_default_str();
  degrade->add_option("--mode", deg_mode, "down or up")->check(CLI::IsMember({"down", "up"}))->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a model; writes the checkpoint and <out>.loss.csv");
  std::string train_cfg, train_out;
  std::optional<std::uint64_t> train_seed;
  train->add_option("--config", train_cfg, "config file (defaults used for missing keys)");
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--seed", train_seed, "overrides train.seed");

  // eval
  auto* eval = app.add_subcommand("eval", "Restore degraded images with a checkpoint and score them");
  std::string ev_ckpt, ev_clean, ev_degraded, ev_metric = "psnr,ssim", ev_channel = "auto", ev_out;
  std::optional<std::size_t> ev_crop;
  eval->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  eval->add_option("--clean", ev_clean, "reference image or directory")->required();
  eval->add_option("--degraded", ev_degraded, "degraded image or directory (matched by file name)")->required();
  eval->add_option("--metric", ev_metric, "comma list of psnr, ssim")->capture_default_str();
  eval->add_option("--channel", ev_channel, "y, rgb, or auto (y for SR, rgb for denoising)")
      ->check(CLI::IsMember({"y", "rgb", "auto"}))
      ->capture_default_str();
  eval->add_option("--crop", ev_crop, "border pixels ignored per side (default: SR scale, 0 for denoising)");
  eval->add_option("--out", ev_out, "write the CSV here instead of stdout");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and the DART block");
  std::string gc_cfg;
  std::size_t gc_seeds = 5;
  gradcheck->add_option("--config", gc_cfg, "config whose model section defines the block");
  gradcheck->add_option("--seeds", gc_seeds, "random draws per check")->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "Multiply-add counts and timing of banded vs dense attention");
  BenchOptions bo;
  std::vector<std::string> bench_modes{"sparse", "dense"};
  bench->add_option("--lengths", bo.lengths, "sequence lengths")->delimiter(',')->capture_default_str();
  bench->add_option("--window", bo.window, "odd band width")->capture_default_str();
  bench->add_option("--dilation", bo.dilation, "band dilation")->capture_default_str();
  bench->add_option("--globals", bo.globals, "evenly spaced global tokens")->capture_default_str();
  bench->add_option("--heads", bo.heads, "attention heads")->capture_default_str();
  bench->add_option("--head-dim", bo.head_dim, "per-head width")->capture_default_str();
  bench->add_option("--mode", bench_modes, "sparse, dense")
      ->delimiter(',')
      ->check(CLI::IsMember({"sparse", "dense"}))
      ->capture_default_str();
  bench->add_option("--seed", bo.seed, "input seed")->capture_default_str();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train full, LongIR-only and CBAM-only models and compare");
  std::string ab_cfg;
  std::vector<std::uint64_t> ab_seeds{0, 1, 2};
  ablate->add_option("--config", ab_cfg, "base config");
  ablate->add_option("--seeds", ab_seeds, "training seeds")->delimiter(',')->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto used = app.get_subcommands();
    err << (used.empty() ? app.help() : used.front()->help());
    return kExitUsage;
  }

  try {
    if (degrade->parsed()) {
      if (!deg_sigma && !deg_scale) throw UsageError("degrade needs --sigma or --scale");
      const ImageBuffer img = read_pnm(deg_in);
      ImageBuffer result;
      if (deg_sigma) {
        Rng rng(deg_seed);
        result = add_awgn(img, *deg_sigma, rng);
      } else {
        result = bicubic_resize(img, *deg_scale, deg_mode == "up");
      }
      write_pnm(deg_out, result);
    } else if (train->parsed()) {
      RunConfig cfg = load_config(train_cfg);
      if (train_seed) cfg.train.seed = *train_seed;
      out << "iter,lr,loss\n";
      char buf[128];
      const TrainedRun run = train_run(cfg, [&](const LossRecord& r) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.17g\n", r.iter, r.lr, r.loss);
        out << buf << std::flush;
      });
      save_checkpoint(train_out, *run.model, run.optimizer.get(), to_config_text(cfg));
      write_file_atomic(loss_csv_path(train_out), loss_csv(run.trace));
      err << "held-out psnr " << fixed(run.held_out_psnr) << " dB\n";
    } else if (eval->parsed()) {
      bool want_psnr = false, want_ssim = false;
      for (const auto& m : split(ev_metric)) {
        if (m == "psnr") want_psnr = true;
        else if (m == "ssim") want_ssim = true;
        else throw UsageError("unknown metric '" + m + "' (expected psnr or ssim)");
      }
      const Checkpoint ckpt = read_checkpoint(ev_ckpt);
      RunConfig cfg;
      try {
        cfg = parse_run_config(ckpt.config_text);
      } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config: ") + e.what());
      }
      DartModel model(cfg.model, 0);
      restore_checkpoint(ckpt, model, nullptr);
      const Task task = cfg.model.task;
      const bool y = ev_channel == "auto" ? is_sr(task) : ev_channel == "y";
      const std::size_t crop = ev_crop.value_or(is_sr(task) ? task_scale(task) : 0);

      std::string csv = "image,task,psnr_db,ssim\n";
      for (const auto& [deg_path, clean_path] : image_pairs(ev_degraded, ev_clean)) {
        const ImageBuffer restored = from_tensor(model.predict(to_tensor(read_pnm(deg_path))));
        const ImageBuffer clean = read_pnm(clean_path);
        MetricReport r{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(), y, crop};
        if (want_psnr) r.psnr_db = psnr_pair(restored, clean, y, crop);
        if (want_ssim) r.ssim = ssim_pair(restored, clean, y, crop);
        csv += metric_csv_row(deg_path.filename().string(), task_name(task), r) + "\n";
      }
      if (ev_out.empty()) out << csv;
      else write_file_atomic(ev_out, csv);
    } else if (gradcheck->parsed()) {
      const RunConfig cfg = load_config(gc_cfg);
      bool ok = true;
      out << "check,seeds,max_rel_error,seconds,status\n";
      for (const auto& s : run_gradcheck_suite(cfg.model, gc_seeds)) {
        const bool pass = s.max_rel_error <= 1e-4;
        ok = ok && pass;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%zu,%.3e,%.2f,%s\n", s.name.c_str(), s.seeds, s.max_rel_error, s.seconds, pass ? "ok" : "FAIL");
        out << buf << std::flush;
      }
      return ok ? kExitOk : kExitRuntime;
    } else if (bench->parsed()) {
      bo.modes = bench_modes;
      out << bench_csv(attention_bench(bo));
    } else if (ablate->parsed()) {
      const RunConfig cfg = load_config(ab_cfg);
      out << "variant,seed,psnr_db\n";
      const AblationResult res = run_ablation(cfg, ab_seeds, [&](const AblationRow& r) {
        out << r.variant << "," << r.seed << "," << fixed(r.psnr) << "\n" << std::flush;
      });
      out << "full,median," << fixed(res.median_full) << "\n";
      out << "longir-only,median," << fixed(res.median_longir_only) << "\n";
      out << "cbam-only,median," << fixed(res.median_cbam_only) << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dart
