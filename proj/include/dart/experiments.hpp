#pragma once

// Whole-pipeline drivers shared by the command-line tool and the acceptance
// suite: gradient-check sweep, attention cost benchmark, training runs and
// the three-way ablation.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dart/config.hpp"

namespace dart {

struct GradCheckSummary {
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0.0;  // worst over seeds and parameters
  double seconds = 0.0;
};

/// Central-difference check of every differentiable op, the attention and
/// refinement modules, the losses, one DART block built from `block_cfg`
/// and a full model with that config, each over `seeds` random draws.
std::vector<GradCheckSummary> run_gradcheck_suite(const DartConfig& block_cfg, std::size_t seeds = 5, double h = 1e-5);

struct BenchRow {
  std::size_t length = 0;
  std::string mode;  // "sparse" (banded kernel) or "dense" (masked N x N oracle)
  std::uint64_t ops = 0;  // forward multiply-adds
  double millis = 0.0;
};

struct BenchOptions {
  std::vector<std::size_t> lengths{256, 512, 1024, 2048};
  std::size_t window = 33;
  std::size_t dilation = 1;
  std::size_t globals = 0;  // evenly spaced, fixed across lengths
  std::size_t heads = 2;
  std::size_t head_dim = 16;
  std::vector<std::string> modes{"sparse", "dense"};
  std::uint64_t seed = 0;
};

std::vector<BenchRow> attention_bench(const BenchOptions& opt);
std::string bench_csv(const std::vector<BenchRow>& rows);

struct TrainedRun {
  std::unique_ptr<DartModel> model;  // heap-held so optimizer pointers stay valid
  std::unique_ptr<Adam> optimizer;
  std::vector<LossRecord> trace;
  double held_out_psnr = 0.0;
};

/// Builds the dataset and model from cfg, trains, and scores the held-out set.
TrainedRun train_run(const RunConfig& cfg, const std::function<void(const LossRecord&)>& on_log = {});

/// Mean held-out PSNR: denoising on all channels without cropping; SR on
/// the Y channel with `scale` pixels cropped per side.
double held_out_psnr(DartModel& model, const SyntheticDataset& data);

struct AblationRow {
  std::string variant;  // "full", "longir-only", "cbam-only"
  std::uint64_t seed = 0;
  double psnr = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  double median_full = 0.0;
  double median_longir_only = 0.0;
  double median_cbam_only = 0.0;
};

double median(std::vector<double> v);

/// Trains full, LongIR-only and CBAM-only variants of base for every seed
/// (train.seed is replaced by each seed).
AblationResult run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace dart
