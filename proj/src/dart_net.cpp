#include "dart/dart_net.hpp"

#include <cmath>

namespace dart {

std::string task_name(Task t) {
  switch (t) {
    case Task::DenoiseGray: return "denoise-gray";
    case Task::DenoiseColor: return "denoise-color";
    case Task::SR2: return "sr2";
    case Task::SR3: return "sr3";
    case Task::SR4: return "sr4";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::DenoiseGray, Task::DenoiseColor, Task::SR2, Task::SR3, Task::SR4})
    if (task_name(t) == name) return t;
  throw ConfigError("unknown task '" + name + "' (expected denoise-gray, denoise-color, sr2, sr3 or sr4)");
}

std::size_t task_scale(Task t) {
  switch (t) {
    case Task::SR2: return 2;
    case Task::SR3: return 3;
    case Task::SR4: return 4;
    default: return 1;
  }
}

std::size_t task_channels(Task t) { return t == Task::DenoiseGray ? 1 : 3; }

void DartConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " must be a positive multiple of heads " + std::to_string(heads));
  if (window == 0) fail("window size must be positive");
  if (longir_window == 0 || longir_window % 2 == 0) fail("LongIR window width must be odd");
  if (longir_dilation == 0) fail("LongIR dilation must be at least 1");
  if (reduction == 0 || embed_dim % reduction != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by reduction rate " + std::to_string(reduction));
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (blocks_per_stage == 0 || stages == 0) fail("need at least one stage and one block per stage");
  if (!use_longir && !use_cbam) fail("use_longir and use_cbam cannot both be false (empty block)");
}

std::size_t expected_parameter_count(const DartConfig& c) {
  const std::size_t D = c.embed_dim, M = c.window, span = 2 * M - 1, hidden = c.mlp_ratio * D;
  const std::size_t attn = 4 * (D * D + D);
  std::size_t block = 2 * D                      // norm1
                      + attn + span * span * c.heads  // window branch
                      + (D * D + D)              // out_proj
                      + 2 * D                    // norm2
                      + (hidden * D + hidden) + (D * hidden + D);
  if (c.use_longir) block += attn + (2 * D * D + D);
  if (c.use_cbam) block += 2 * D * (D / c.reduction) + (2 * 49 + 1);
  const std::size_t stage = c.blocks_per_stage * block + (9 * D * D + D);
  const std::size_t cin = task_channels(c.task);
  const std::size_t cout = cin * task_scale(c.task) * task_scale(c.task);
  return (9 * cin * D + D) + c.stages * stage + (9 * D * cout + cout);
}

// ---------------------------------------------------------------------------

namespace {

Tensor trunc_normal(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.truncated_normal(0.02);
  return t;
}

}  // namespace

Conv2dParams Conv2dParams::create(const std::string& prefix, std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
  Tensor w(Shape{c_out, c_in, k, k});
  for (auto& v : w.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return {Parameter(prefix + ".weight", std::move(w)), Parameter(prefix + ".bias", Tensor(Shape{c_out}, 0.0))};
}

LinearParams LinearParams::create(const std::string& prefix, std::size_t out, std::size_t in, Rng& rng, bool zero) {
  Tensor w = zero ? Tensor(Shape{out, in}, 0.0) : trunc_normal(Shape{out, in}, rng);
  return {Parameter(prefix + ".weight", std::move(w)), Parameter(prefix + ".bias", Tensor(Shape{out}, 0.0))};
}

NormParams NormParams::create(const std::string& prefix, std::size_t dim) {
  return {Parameter(prefix + ".gamma", Tensor(Shape{dim}, 1.0)), Parameter(prefix + ".beta", Tensor(Shape{dim}, 0.0))};
}

// ---------------------------------------------------------------------------
// Block

DartBlock::DartBlock(const std::string& prefix, const DartConfig& cfg, Rng& rng)
    : norm1(NormParams::create(prefix + ".norm1", cfg.embed_dim)),
      window_attn(AttentionParams::create(prefix + ".window", cfg.embed_dim, cfg.heads, cfg.window, rng)),
      out_proj(LinearParams::create(prefix + ".out_proj", cfg.embed_dim, cfg.embed_dim, rng, true)),
      norm2(NormParams::create(prefix + ".norm2", cfg.embed_dim)),
      mlp_fc1(LinearParams::create(prefix + ".mlp.fc1", cfg.mlp_ratio * cfg.embed_dim, cfg.embed_dim, rng)),
      mlp_fc2(LinearParams::create(prefix + ".mlp.fc2", cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim, rng, true)),
      window_(cfg.window) {
  cfg.validate();
  if (cfg.use_longir) {
    longir_attn = AttentionParams::create(prefix + ".longir", cfg.embed_dim, cfg.heads, 0, rng);
    fusion = FusionParams::create(prefix + ".fusion", cfg.embed_dim, rng);
  }
  if (cfg.use_cbam) {
    channel_attn = ChannelAttnParams::create(prefix + ".channel_attn", cfg.embed_dim, cfg.reduction, rng);
    spatial_attn = SpatialAttnParams::create(prefix + ".spatial_attn", rng);
  }
}

std::vector<Parameter*> DartBlock::parameters() {
  std::vector<Parameter*> ps;
  auto take = [&ps](std::vector<Parameter*> more) { ps.insert(ps.end(), more.begin(), more.end()); };
  take(norm1.parameters());
  take(window_attn.parameters());
  if (longir_attn) take(longir_attn->parameters());
  if (fusion) take(fusion->parameters());
  if (channel_attn) take(channel_attn->parameters());
  if (spatial_attn) take(spatial_attn->parameters());
  take(out_proj.parameters());
  take(norm2.parameters());
  take(mlp_fc1.parameters());
  take(mlp_fc2.parameters());
  return ps;
}

Var DartBlock::forward(Var x, const LongIRMask* mask) {
  if (x.rank() != 3 || x.dim(2) != window_attn.dim) {
    throw ShapeError("DART block expects [H,W," + std::to_string(window_attn.dim) + "], got " + shape_str(x.shape()));
  }
  Tape& t = x.tape();
  const std::size_t H = x.dim(0), W = x.dim(1), D = x.dim(2), N = H * W;

  Var h = layer_norm(x, t.param(norm1.gamma), t.param(norm1.beta));
  auto part = window_partition(h, window_);
  Var tokens = reshape(window_reverse(window_attention(part.windows, window_attn), part.grid), Shape{N, D});
  if (longir_attn) {
    if (mask == nullptr) throw ConfigError("DART block with LongIR needs a mask");
    Var long_range = longir_attention(reshape(h, Shape{N, D}), *mask, *longir_attn);
    tokens = fuse_branches(tokens, long_range, *fusion);
  }
  if (channel_attn) {
    Var chw = permute(reshape(tokens, Shape{H, W, D}), {2, 0, 1});
    Var refined = cbam_refine(chw, *channel_attn, *spatial_attn);
    tokens = reshape(permute(refined, {1, 2, 0}), Shape{N, D});
  }
  Var y = add(x, reshape(linear(tokens, t.param(out_proj.weight), t.param(out_proj.bias)), Shape{H, W, D}));

  Var m = layer_norm(y, t.param(norm2.gamma), t.param(norm2.beta));
  m = gelu(linear(m, t.param(mlp_fc1.weight), t.param(mlp_fc1.bias)));
  m = linear(m, t.param(mlp_fc2.weight), t.param(mlp_fc2.bias));
  return add(y, m);
}

// ---------------------------------------------------------------------------

Var pixel_shuffle(Var x, std::size_t s) {
  if (x.rank() != 3 || s == 0 || x.dim(0) % (s * s) != 0) {
    throw ShapeError("pixel_shuffle: channel count of " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(s * s));
  }
  const std::size_t C = x.dim(0) / (s * s), H = x.dim(1), W = x.dim(2);
  return reshape(permute(reshape(x, Shape{C, s, s, H, W}), {0, 3, 1, 4, 2}), Shape{C, s * H, s * W});
}

Var pixel_unshuffle(Var x, std::size_t s) {
  if (x.rank() != 3 || s == 0 || x.dim(1) % s != 0 || x.dim(2) % s != 0) {
    throw ShapeError("pixel_unshuffle: spatial size of " + shape_str(x.shape()) + " not divisible by " + std::to_string(s));
  }
  const std::size_t C = x.dim(0), H = x.dim(1) / s, W = x.dim(2) / s;
  return reshape(permute(reshape(x, Shape{C, H, s, W, s}), {0, 2, 4, 1, 3}), Shape{C * s * s, H, W});
}

// ---------------------------------------------------------------------------
// Model

DartModel::DartModel(const DartConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t D = cfg_.embed_dim, cin = task_channels(cfg_.task), s = task_scale(cfg_.task);
  shallow = Conv2dParams::create("shallow", D, cin, 3, rng);
  for (std::size_t si = 0; si < cfg_.stages; ++si) {
    const std::string sp = "stages." + std::to_string(si);
    Stage st;
    for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b)
      st.blocks.emplace_back(sp + ".blocks." + std::to_string(b), cfg_, rng);
    st.conv = Conv2dParams::create(sp + ".conv", D, D, 3, rng);
    stages.push_back(std::move(st));
  }
  head = Conv2dParams::create("head", cin * s * s, D, 3, rng);
  if (!is_sr(cfg_.task)) head.weight.value.fill(0.0);  // global residual starts as the identity
}

std::vector<Parameter*> DartModel::parameters() {
  std::vector<Parameter*> ps = shallow.parameters();
  for (auto& st : stages) {
    for (auto& b : st.blocks) {
      auto bp = b.parameters();
      ps.insert(ps.end(), bp.begin(), bp.end());
    }
    ps.push_back(&st.conv.weight);
    ps.push_back(&st.conv.bias);
  }
  ps.push_back(&head.weight);
  ps.push_back(&head.bias);
  return ps;
}

std::size_t DartModel::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

LongIRMask DartModel::longir_mask(std::size_t height, std::size_t width) const {
  const std::size_t N = height * width;
  return build_longir_mask(N, cfg_.longir_window, cfg_.longir_dilation,
                           window_anchor_globals(N, cfg_.window, cfg_.globals_per_window));
}

Var DartModel::forward(Var img) {
  const std::size_t cin = task_channels(cfg_.task);
  if (img.rank() != 3 || img.dim(0) != cin) {
    throw ShapeError("model input must be [" + std::to_string(cin) + ",H,W] for task " + task_name(cfg_.task) + ", got " +
                     shape_str(img.shape()));
  }
  Tape& t = img.tape();
  const std::size_t H = img.dim(1), W = img.dim(2);
  std::optional<LongIRMask> mask;
  if (cfg_.use_longir) mask = longir_mask(H, W);

  Var x = conv2d(img, t.param(shallow.weight), t.param(shallow.bias));  // [D,H,W]
  for (auto& st : stages) {
    Var tokens = permute(x, {1, 2, 0});
    for (auto& b : st.blocks) tokens = b.forward(tokens, mask ? &*mask : nullptr);
    x = add(x, conv2d(permute(tokens, {2, 0, 1}), t.param(st.conv.weight), t.param(st.conv.bias)));
  }
  Var out = conv2d(x, t.param(head.weight), t.param(head.bias));
  if (is_sr(cfg_.task)) return pixel_shuffle(out, task_scale(cfg_.task));
  return add(img, out);
}

Tensor DartModel::predict(const Tensor& img) {
  Tape tape(false);
  return forward(tape.constant(img)).value();
}

}  // namespace dart
