#pragma once

// The DART block (window attention || LongIR -> fusion -> CBAM -> projection,
// then MLP, both residual) and the restoration network around it.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dart/attention.hpp"
#include "dart/cbam.hpp"

namespace dart {

enum class Task { DenoiseGray, DenoiseColor, SR2, SR3, SR4 };

std::string task_name(Task t);
Task parse_task(const std::string& name);
/// Spatial upscale factor; 1 for denoising.
std::size_t task_scale(Task t);
std::size_t task_channels(Task t);
inline bool is_sr(Task t) { return task_scale(t) > 1; }

struct DartConfig {
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t window = 8;
  std::size_t longir_window = 9;  // odd span w
  std::size_t longir_dilation = 2;
  std::size_t globals_per_window = 1;
  std::size_t reduction = 4;
  std::size_t mlp_ratio = 2;
  std::size_t blocks_per_stage = 2;
  std::size_t stages = 1;
  Task task = Task::DenoiseGray;
  bool use_longir = true;
  bool use_cbam = true;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  bool operator==(const DartConfig&) const = default;
};

/// Parameter count as a closed-form function of the config.
std::size_t expected_parameter_count(const DartConfig& cfg);

struct Conv2dParams {
  Parameter weight;  // [C_out, C_in, k, k]
  Parameter bias;    // [C_out]

  static Conv2dParams create(const std::string& prefix, std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng);
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

struct LinearParams {
  Parameter weight;  // [out, in]
  Parameter bias;    // [out]

  static LinearParams create(const std::string& prefix, std::size_t out, std::size_t in, Rng& rng, bool zero = false);
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

struct NormParams {
  Parameter gamma;
  Parameter beta;

  static NormParams create(const std::string& prefix, std::size_t dim);
  std::vector<Parameter*> parameters() { return {&gamma, &beta}; }
};

class DartBlock {
 public:
  DartBlock(const std::string& prefix, const DartConfig& cfg, Rng& rng);

  /// x: [H,W,D]. mask must cover H*W raster tokens when LongIR is enabled.
  Var forward(Var x, const LongIRMask* mask);
  std::vector<Parameter*> parameters();

  NormParams norm1;
  AttentionParams window_attn;
  std::optional<AttentionParams> longir_attn;
  std::optional<FusionParams> fusion;
  std::optional<ChannelAttnParams> channel_attn;
  std::optional<SpatialAttnParams> spatial_attn;
  LinearParams out_proj;
  NormParams norm2;
  LinearParams mlp_fc1;
  LinearParams mlp_fc2;

 private:
  std::size_t window_;
};

/// Channel-to-space: [C*s*s, H, W] -> [C, sH, sW] with
/// out(c, s*i+a, s*j+b) = in(c*s*s + a*s + b, i, j).
Var pixel_shuffle(Var x, std::size_t s);
/// Inverse of pixel_shuffle.
Var pixel_unshuffle(Var x, std::size_t s);

class DartModel {
 public:
  DartModel(const DartConfig& cfg, std::uint64_t seed);

  const DartConfig& config() const { return cfg_; }
  /// Every parameter, in a fixed order, each with a unique checkpoint name.
  std::vector<Parameter*> parameters();
  std::size_t parameter_count();

  /// img: [C,H,W] in [0,1]. Denoise returns the same shape; SR returns
  /// [C, sH, sW].
  Var forward(Var img);
  /// Gradient-free forward on a throwaway tape.
  Tensor predict(const Tensor& img);

  /// LongIR mask the blocks use for an H x W feature map.
  LongIRMask longir_mask(std::size_t height, std::size_t width) const;

  struct Stage {
    std::vector<DartBlock> blocks;
    Conv2dParams conv;
  };

  Conv2dParams shallow;
  std::vector<Stage> stages;
  Conv2dParams head;

 private:
  DartConfig cfg_;
};

}  // namespace dart
