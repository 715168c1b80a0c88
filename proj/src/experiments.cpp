#include "dart/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "dart/metrics.hpp"

namespace dart {

// ---------------------------------------------------------------------------
// gradient-check sweep

namespace {

Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Scalar probe sum(out * R). R is kept at 1e-4 so the difference quotient's
// roundoff (about eps * |f| / h) stays under floor * tolerance = 1e-12; with
// a larger probe, gradients that are exactly zero (key bias under softmax
// shift invariance) or cancel to ~1e-8 fail on roundoff alone.
Var probe(Var out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  return sum(mul(out, out.tape().constant(uniform_tensor(out.shape(), rng, -1e-4, 1e-4))));
}

void randomize(const std::vector<Parameter*>& ps, Rng& rng, double scale) {
  for (auto* p : ps) p->value = uniform_tensor(p->value.shape(), rng, -scale, scale);
}

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(std::vector<Var>&)> build;
};

double check_op(const OpCase& c, std::uint64_t seed, double h) {
  Rng rng(seed * 1000 + 7);
  std::vector<Parameter> params;
  params.reserve(c.shapes.size());
  for (std::size_t i = 0; i < c.shapes.size(); ++i)
    params.emplace_back("in" + std::to_string(i), uniform_tensor(c.shapes[i], rng));
  std::vector<Parameter*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  return grad_check(
             [&](Tape& t) {
               std::vector<Var> vars;
               for (auto& p : params) vars.push_back(t.param(p));
               return probe(c.build(vars), seed);
             },
             ptrs, h)
      .max_rel_error;
}

// Checks a module whose parameters live in `params`, after randomizing them;
// `input` is the module's data input and is checked as a parameter too.
double check_module(std::vector<Parameter*> params, Parameter& input, const std::function<Var(Tape&)>& run,
                    std::uint64_t seed, double h, double scale = 0.3) {
  Rng rng(seed * 1000 + 11);
  randomize(params, rng, scale);
  input.value = uniform_tensor(input.value.shape(), rng);
  params.push_back(&input);
  return grad_check([&](Tape& t) { return probe(run(t), seed); }, params, h).max_rel_error;
}

}  // namespace

std::vector<GradCheckSummary> run_gradcheck_suite(const DartConfig& block_cfg, std::size_t seeds, double h) {
  block_cfg.validate();
  BoolTensor band(Shape{6, 6}, false);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (i == j || i + 1 == j || j + 2 == i) band.data[i * 6 + j] = 1;
  const LongIRMask small_mask = build_longir_mask(12, 3, 2, {5});

  std::vector<OpCase> ops = {
      {"add", {{3, 4}, {4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {4}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"scale", {{5}}, [](auto& v) { return add_scalar(scale(v[0], -1.7), 0.3); }},
      {"relu", {{12}}, [](auto& v) { return relu(v[0]); }},
      {"sigmoid", {{12}}, [](auto& v) { return sigmoid(v[0]); }},
      {"gelu", {{12}}, [](auto& v) { return gelu(v[0]); }},
      {"sum", {{7}}, [](auto& v) { return sum(mul(v[0], v[0])); }},
      {"mean", {{7}}, [](auto& v) { return mean(mul(v[0], v[0])); }},
      {"matmul", {{2, 3, 4}, {2, 4, 5}}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"matmul_shared", {{2, 3, 4}, {4, 5}}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"linear", {{2, 3, 4}, {5, 4}, {5}}, [](auto& v) { return linear(v[0], v[1], v[2]); }},
      {"masked_softmax", {{2, 6, 6}}, [&band](auto& v) { return masked_softmax_lastdim(scale(v[0], 3.0), &band); }},
      {"conv2d_3x3", {{2, 5, 6}, {3, 2, 3, 3}, {3}}, [](auto& v) { return conv2d(v[0], v[1], v[2]); }},
      {"conv2d_7x7", {{2, 4, 5}, {1, 2, 7, 7}, {1}}, [](auto& v) { return conv2d(v[0], v[1], v[2]); }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto& v) { return layer_norm(v[0], v[1], v[2]); }},
      {"global_avg_pool", {{3, 4, 2}}, [](auto& v) { return global_avg_pool(v[0]); }},
      {"global_max_pool", {{3, 4, 2}}, [](auto& v) { return global_max_pool(v[0]); }},
      {"channel_mean", {{3, 4, 2}}, [](auto& v) { return channel_mean(v[0]); }},
      {"channel_max", {{3, 4, 2}}, [](auto& v) { return channel_max(v[0]); }},
      {"mul_channels", {{3, 4, 2}, {3}}, [](auto& v) { return mul_channels(v[0], v[1]); }},
      {"reshape", {{3, 4}}, [](auto& v) { return reshape(v[0], Shape{2, 6}); }},
      {"permute", {{2, 3, 4}}, [](auto& v) { return permute(v[0], {2, 0, 1}); }},
      {"concat", {{2, 3}, {2, 2}}, [](auto& v) { return concat({v[0], v[1]}, 1); }},
      {"gather_rows", {{4, 3}}, [](auto& v) { return gather_rows(v[0], {3, 1, 1, 0, 3}); }},
      {"banded_attention", {{2, 12, 3}, {2, 12, 3}, {2, 12, 3}},
       [&small_mask](auto& v) { return banded_attention(v[0], v[1], v[2], small_mask, 0.7); }},
      {"pixel_shuffle", {{8, 2, 3}}, [](auto& v) { return pixel_shuffle(v[0], 2); }},
      {"charbonnier_loss", {{3, 5}, {3, 5}}, [](auto& v) { return charbonnier_loss(v[0], v[1]); }},
  };

  std::vector<GradCheckSummary> out;
  auto sweep = [&](const std::string& name, const std::function<double(std::uint64_t)>& one) {
    GradCheckSummary s{name, seeds, 0.0, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed = 0; seed < seeds; ++seed) s.max_rel_error = std::max(s.max_rel_error, one(seed));
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(s);
  };
  for (const auto& op : ops) sweep(op.name, [&](std::uint64_t seed) { return check_op(op, seed, h); });

  // L1 away from ties: inputs offset so |pred - target| >= 0.05.
  sweep("l1_loss", [&](std::uint64_t seed) {
    Rng rng(seed + 31);
    Parameter pred("pred", uniform_tensor({3, 5}, rng));
    Tensor target = uniform_tensor({3, 5}, rng);
    for (std::size_t i = 0; i < target.size(); ++i)
      if (std::abs(pred.value[i] - target[i]) < 0.05) target[i] += 0.1;
    std::vector<Parameter*> ps{&pred};
    return grad_check([&](Tape& t) { return l1_loss(t.param(pred), t.constant(target)); }, ps, h).max_rel_error;
  });

  const std::size_t D = block_cfg.embed_dim, M = block_cfg.window;
  // Three small windows; the block check below covers the configured size.
  sweep("window_attention", [&](std::uint64_t seed) {
    Rng init(seed);
    auto p = AttentionParams::create("w", D, block_cfg.heads, 4, init);
    Parameter x("x", Tensor({3, 16, D}));
    return check_module(p.parameters(), x, [&](Tape& t) { return window_attention(t.param(x), p); }, seed, h);
  });
  sweep("longir_attention", [&](std::uint64_t seed) {
    Rng init(seed);
    auto p = AttentionParams::create("l", D, block_cfg.heads, 0, init);
    const std::size_t N = 40;
    const auto mask = build_longir_mask(N, block_cfg.longir_window, block_cfg.longir_dilation,
                                        window_anchor_globals(N, M, block_cfg.globals_per_window));
    Parameter x("x", Tensor({N, D}));
    return check_module(p.parameters(), x, [&](Tape& t) { return longir_attention(t.param(x), mask, p); }, seed, h);
  });
  sweep("fusion", [&](std::uint64_t seed) {
    Rng init(seed);
    auto p = FusionParams::create("f", D, init);
    Parameter a("a", Tensor({10, D})), b("b", Tensor({10, D}));
    auto ps = p.parameters();
    ps.push_back(&b);
    return check_module(ps, a, [&](Tape& t) { return fuse_branches(t.param(a), t.param(b), p); }, seed, h);
  });
  sweep("channel_attention", [&](std::uint64_t seed) {
    Rng init(seed);
    auto p = ChannelAttnParams::create("c", D, block_cfg.reduction, init);
    Parameter x("x", Tensor({D, 5, 6}));
    return check_module(p.parameters(), x, [&](Tape& t) { return channel_attention(t.param(x), p).out; }, seed, h, 1.0);
  });
  sweep("spatial_attention", [&](std::uint64_t seed) {
    Rng init(seed);
    auto p = SpatialAttnParams::create("s", init);
    Parameter x("x", Tensor({D, 5, 6}));
    return check_module(p.parameters(), x, [&](Tape& t) { return spatial_attention(t.param(x), p).out; }, seed, h);
  });
  sweep("cbam_refine", [&](std::uint64_t seed) {
    Rng init(seed);
    auto c = ChannelAttnParams::create("c", D, block_cfg.reduction, init);
    auto s = SpatialAttnParams::create("s", init);
    auto ps = c.parameters();
    for (auto* q : s.parameters()) ps.push_back(q);
    Parameter x("x", Tensor({D, 6, 5}));
    return check_module(ps, x, [&](Tape& t) { return cbam_refine(t.param(x), c, s); }, seed, h);
  });
  sweep("dart_block", [&](std::uint64_t seed) {
    Rng init(seed);
    DartBlock block("b", block_cfg, init);
    const std::size_t H = 8, W = 8;
    const auto mask = build_longir_mask(H * W, block_cfg.longir_window, block_cfg.longir_dilation,
                                        window_anchor_globals(H * W, M, block_cfg.globals_per_window));
    Parameter x("x", Tensor({H, W, D}));
    return check_module(block.parameters(), x, [&](Tape& t) { return block.forward(t.param(x), &mask); }, seed, h);
  });
  // Whole network at reduced width: every element of every parameter is
  // perturbed, so the desk-size model would cost minutes per seed.
  DartConfig net_cfg = block_cfg;
  net_cfg.embed_dim = 8;
  net_cfg.heads = 2;
  net_cfg.window = 4;
  net_cfg.reduction = 2;
  net_cfg.blocks_per_stage = 1;
  net_cfg.stages = 1;
  net_cfg.validate();
  sweep("dart_model", [&](std::uint64_t seed) {
    DartModel model(net_cfg, seed);
    const std::size_t C = task_channels(net_cfg.task);
    Parameter img("img", Tensor({C, 8, 8}));
    return check_module(model.parameters(), img, [&](Tape& t) { return model.forward(t.param(img)); }, seed, h, 0.2);
  });
  return out;
}

// ---------------------------------------------------------------------------
// cost benchmark

std::vector<BenchRow> attention_bench(const BenchOptions& opt) {
  for (const auto& m : opt.modes)
    if (m != "sparse" && m != "dense") throw ConfigError("bench mode must be sparse or dense, got '" + m + "'");
  std::vector<BenchRow> rows;
  for (std::size_t N : opt.lengths) {
    if (opt.globals > N) throw ConfigError("more global tokens than sequence length");
    std::vector<std::size_t> globals;
    for (std::size_t g = 0; g < opt.globals; ++g) globals.push_back(g * N / opt.globals);
    const LongIRMask mask = build_longir_mask(N, opt.window, opt.dilation, globals);
    Rng rng(opt.seed + N);
    const Shape shape{opt.heads, N, opt.head_dim};
    const Tensor q = uniform_tensor(shape, rng), k = uniform_tensor(shape, rng), v = uniform_tensor(shape, rng);
    const double scale = 1.0 / std::sqrt(static_cast<double>(opt.head_dim));
    for (const auto& mode : opt.modes) {
      Tape tape(false);
      const BoolTensor dense = mode == "dense" ? mask.dense() : BoolTensor{};
      reset_mac_counter();
      const auto t0 = std::chrono::steady_clock::now();
      if (mode == "sparse") {
        banded_attention(tape.constant(q), tape.constant(k), tape.constant(v), mask, scale);
      } else {
        dense_masked_attention(tape.constant(q), tape.constant(k), tape.constant(v), dense, scale);
      }
      const auto t1 = std::chrono::steady_clock::now();
      rows.push_back({N, mode, mac_counter(), std::chrono::duration<double, std::milli>(t1 - t0).count()});
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "length,mode,ops,millis\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%llu,%.3f\n", r.length, r.mode.c_str(),
                  static_cast<unsigned long long>(r.ops), r.millis);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

double held_out_psnr(DartModel& model, const SyntheticDataset& data) {
  if (data.held_out().empty()) throw ConfigError("no held-out images to evaluate");
  const bool sr = is_sr(data.task());
  const std::size_t border = sr ? task_scale(data.task()) : 0;
  double total = 0.0;
  for (const auto& [low, clean] : data.held_out()) {
    const ImageBuffer out = from_tensor(model.predict(to_tensor(low)));
    total += psnr_pair(out, clean, sr, border);
  }
  return total / static_cast<double>(data.held_out().size());
}

TrainedRun train_run(const RunConfig& cfg, const std::function<void(const LossRecord&)>& on_log) {
  validate(cfg);
  const SyntheticDataset data(cfg.model.task, cfg.data);
  TrainedRun run;
  run.model = std::make_unique<DartModel>(cfg.model, cfg.train.seed);
  run.optimizer = std::make_unique<Adam>(run.model->parameters(), cfg.train.optim);
  run.trace = train_loop(*run.model, *run.optimizer, cfg.train, [&data](Rng& r) { return data.sample(r); }, on_log);
  run.held_out_psnr = held_out_psnr(*run.model, data);
  return run;
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

AblationResult run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            const std::function<void(const AblationRow&)>& on_row) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  struct Variant {
    const char* name;
    bool longir, cbam;
  };
  const Variant variants[] = {{"full", true, true}, {"longir-only", true, false}, {"cbam-only", false, true}};
  AblationResult result;
  std::vector<double> per[3];
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.model.use_longir = variants[k].longir;
      cfg.model.use_cbam = variants[k].cbam;
      cfg.train.seed = seed;
      const double psnr = train_run(cfg).held_out_psnr;
      result.rows.push_back({variants[k].name, seed, psnr});
      per[k].push_back(psnr);
      if (on_row) on_row(result.rows.back());
    }
  }
  result.median_full = median(per[0]);
  result.median_longir_only = median(per[1]);
  result.median_cbam_only = median(per[2]);
  return result;
}

}  // namespace dart
