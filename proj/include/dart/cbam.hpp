#pragma once

// Feature-dimension (channel) and positional-dimension (spatial) gates,
// applied channel first.

#include <string>
#include <vector>

#include "dart/autograd.hpp"
#include "dart/rng.hpp"

namespace dart {

/// Shared bottleneck MLP for both pooled descriptors:
/// M_c = sigmoid(W1 relu(W0 avg) + W1 relu(W0 max)). No biases.
struct ChannelAttnParams {
  std::size_t channels = 0;
  std::size_t reduction = 1;
  Parameter w0;  // [C/r, C]
  Parameter w1;  // [C, C/r]

  static ChannelAttnParams create(const std::string& prefix, std::size_t channels, std::size_t reduction, Rng& rng);
  std::vector<Parameter*> parameters() { return {&w0, &w1}; }
};

/// One 7x7 convolution, [mean; max] over channels -> 1 map, with bias.
struct SpatialAttnParams {
  static constexpr std::size_t kernel_size = 7;
  Parameter weight;  // [1, 2, 7, 7]
  Parameter bias;    // [1]

  static SpatialAttnParams create(const std::string& prefix, Rng& rng);
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

struct GatedFeature {
  Var gate;  // channel: [C]; spatial: [1,H,W]
  Var out;   // [C,H,W]
};

GatedFeature channel_attention(Var feature, ChannelAttnParams& p);
GatedFeature spatial_attention(Var feature, SpatialAttnParams& p);

/// channel_attention followed by spatial_attention on its output.
Var cbam_refine(Var feature, ChannelAttnParams& cp, SpatialAttnParams& sp);

}  // namespace dart
