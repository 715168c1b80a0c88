#include "dart/cbam.hpp"

#include <cmath>

namespace dart {

namespace {

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

}  // namespace

ChannelAttnParams ChannelAttnParams::create(const std::string& prefix, std::size_t channels, std::size_t reduction,
                                            Rng& rng) {
  if (reduction == 0 || channels == 0 || channels % reduction != 0) {
    throw ConfigError("channel count " + std::to_string(channels) + " not divisible by reduction rate " +
                      std::to_string(reduction));
  }
  const std::size_t hidden = channels / reduction;
  ChannelAttnParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.w0 = Parameter(prefix + ".w0", uniform_init(Shape{hidden, channels}, channels, rng));
  p.w1 = Parameter(prefix + ".w1", uniform_init(Shape{channels, hidden}, hidden, rng));
  return p;
}

SpatialAttnParams SpatialAttnParams::create(const std::string& prefix, Rng& rng) {
  constexpr std::size_t k = kernel_size;
  return {Parameter(prefix + ".weight", uniform_init(Shape{1, 2, k, k}, 2 * k * k, rng)),
          Parameter(prefix + ".bias", Tensor(Shape{1}, 0.0))};
}

GatedFeature channel_attention(Var feature, ChannelAttnParams& p) {
  if (feature.rank() != 3) throw ShapeError("channel_attention: expected [C,H,W], got " + shape_str(feature.shape()));
  if (feature.dim(0) % p.reduction != 0) {
    throw ConfigError("channel_attention: " + std::to_string(feature.dim(0)) + " channels not divisible by r=" +
                      std::to_string(p.reduction));
  }
  if (feature.dim(0) != p.channels) {
    throw ShapeError("channel_attention: " + std::to_string(feature.dim(0)) + " channels, parameters expect " +
                     std::to_string(p.channels));
  }
  Tape& t = feature.tape();
  Var w0 = t.param(p.w0);
  Var w1 = t.param(p.w1);
  auto mlp = [&](Var v) { return linear(relu(linear(v, w0)), w1); };
  Var gate = sigmoid(add(mlp(global_avg_pool(feature)), mlp(global_max_pool(feature))));
  return {gate, mul_channels(feature, gate)};
}

GatedFeature spatial_attention(Var feature, SpatialAttnParams& p) {
  if (feature.rank() != 3) throw ShapeError("spatial_attention: expected [C,H,W], got " + shape_str(feature.shape()));
  const std::size_t H = feature.dim(1), W = feature.dim(2);
  if (H <= SpatialAttnParams::kernel_size / 2 || W <= SpatialAttnParams::kernel_size / 2) {
    throw SizeError("spatial_attention: " + std::to_string(H) + "x" + std::to_string(W) +
                    " map is below the 7x7 reflect-pad support (needs at least 4x4)");
  }
  Tape& t = feature.tape();
  Var pooled = concat({channel_mean(feature), channel_max(feature)}, 0);
  Var gate = sigmoid(conv2d(pooled, t.param(p.weight), t.param(p.bias)));
  return {gate, mul(feature, reshape(gate, Shape{H, W}))};
}

Var cbam_refine(Var feature, ChannelAttnParams& cp, SpatialAttnParams& sp) {
  return spatial_attention(channel_attention(feature, cp).out, sp).out;
}

}  // namespace dart
