#pragma once

// Losses, Adam/AdamW, the warmup-and-halving schedule, the training loop and
// the binary checkpoint format.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dart/dart_net.hpp"
#include "dart/data.hpp"

namespace dart {

/// mean |pred - target|; the subgradient at an exact tie is 0.
Var l1_loss(Var pred, Var target);
/// mean sqrt((pred - target)^2 + eps^2).
Var charbonnier_loss(Var pred, Var target, double eps = 1e-3);

enum class OptimMode { Adam, AdamW };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; used only in AdamW mode
  OptimMode mode = OptimMode::Adam;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg = {});

  /// One bias-corrected update from the gradients currently in each
  /// Parameter::grad. Throws NumericError on a non-finite gradient, before
  /// touching any parameter.
  void step(double lr);
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<Parameter*>& params() const { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_steps(std::size_t s) { step_ = s; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t step_ = 0;
};

struct LrSchedule {
  double warmup_start = 1e-5;
  double base = 2e-4;
  std::size_t warmup_iters = 100;
  std::vector<std::size_t> milestones{1000, 1500};

  void validate() const;
  /// Linear warmup from warmup_start to base over warmup_iters, then base
  /// halved once per milestone already reached.
  double at(std::size_t iter) const;
};

enum class LossKind { L1, Charbonnier };

struct DataConfig {
  std::size_t patch = 32;          // LR patch side for SR, clean patch side for denoising
  double sigma = 25.0;             // AWGN level on the 0-255 scale
  std::size_t train_images = 64;   // procedural scenes in the training pool
  std::size_t image_size = 96;     // side of each training scene (HR side for SR)
  std::size_t stride = 4;          // patch anchor grid
  std::size_t eval_images = 16;    // held-out scenes
  std::size_t eval_size = 32;      // held-out scene side (LR side for SR)
  std::uint64_t seed = 1;          // scene generation; held-out scenes use a derived seed
};

struct TrainConfig {
  std::size_t iters = 2000;
  std::size_t batch_size = 1;
  LossKind loss = LossKind::L1;
  double charbonnier_eps = 1e-3;
  AdamConfig optim;
  LrSchedule schedule;
  std::size_t log_every = 50;
  std::uint64_t seed = 0;  // model init and batch sampling
};

/// One training example as [C,H,W] tensors in [0,1].
struct Sample {
  Tensor input;
  Tensor target;
};

/// Training pool and held-out set built from procedural scenes.
class SyntheticDataset {
 public:
  SyntheticDataset(Task task, const DataConfig& cfg);

  /// Random patch pair; draws scene, anchor and noise from rng.
  Sample sample(Rng& rng) const;
  /// Fixed held-out pairs (degradation drawn once with a fixed seed).
  const std::vector<std::pair<ImageBuffer, ImageBuffer>>& held_out() const { return held_out_; }  // (degraded, clean)
  Task task() const { return task_; }

 private:
  ImageBuffer degrade(const ImageBuffer& clean, Rng& rng) const;

  Task task_;
  DataConfig cfg_;
  std::vector<ImageBuffer> pool_;
  std::vector<PatchAnchor> anchors_;
  std::vector<std::pair<ImageBuffer, ImageBuffer>> held_out_;
};

struct LossRecord {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// "iter,lr,loss" with the header line.
std::string loss_csv(const std::vector<LossRecord>& trace);

using SampleSource = std::function<Sample(Rng&)>;

/// Runs cfg.iters Adam steps. Each iteration draws batch_size samples, averages
/// the loss over them and takes one step at schedule.at(iter). Records the
/// batch loss every log_every iterations and at the last one. Throws
/// NumericError on a non-finite loss.
std::vector<LossRecord> train_loop(DartModel& model, Adam& opt, const TrainConfig& cfg, const SampleSource& source,
                                   const std::function<void(const LossRecord&)>& on_log = {});

// --- checkpoints -----------------------------------------------------------

struct CheckpointError : Error {
  using Error::Error;
};
struct CheckpointMagicError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointShapeError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::string config_text;
  std::vector<NamedTensor> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

/// Model parameters, plus Adam moments ("adam.m.<name>", "adam.v.<name>")
/// and step count ("adam.step") when opt is given.
Checkpoint make_checkpoint(DartModel& model, const Adam* opt, const std::string& config_text);
/// Copies tensors into the model (and optimizer). Every model parameter must
/// be present with a matching shape; a mismatch raises CheckpointShapeError
/// naming the tensor.
void restore_checkpoint(const Checkpoint& ckpt, DartModel& model, Adam* opt);

void save_checkpoint(const std::filesystem::path& path, DartModel& model, const Adam* opt,
                     const std::string& config_text);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace dart
