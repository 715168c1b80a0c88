#include "dart/attention.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace dart {

namespace {

// Mirror an index into [0, n) by repeated reflection about both edges.
std::size_t fold_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

Tensor truncated_normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.truncated_normal(stddev);
  return t;
}

// [.., T, D] -> [.., h, T, dh]
Var split_heads(Var x, std::size_t heads) {
  Shape s = x.shape();
  const std::size_t D = s.back();
  const std::size_t T = s[s.size() - 2];
  if (s.size() == 2) return permute(reshape(x, Shape{T, heads, D / heads}), {1, 0, 2});
  const std::size_t B = x.value().size() / (T * D);
  return permute(reshape(x, Shape{B, T, heads, D / heads}), {0, 2, 1, 3});
}

// Inverse of split_heads back to [.., T, D].
Var merge_heads(Var x) {
  Shape s = x.shape();
  if (s.size() == 3) {
    const std::size_t h = s[0], T = s[1], dh = s[2];
    return reshape(permute(x, {1, 0, 2}), Shape{T, h * dh});
  }
  const std::size_t B = s[0], h = s[1], T = s[2], dh = s[3];
  return reshape(permute(x, {0, 2, 1, 3}), Shape{B, T, h * dh});
}

void check_heads(Var q, Var k, Var v, const char* op) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError(std::string(op) + ": q/k/v must share shape [h,N,dh], got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Window geometry

WindowGrid make_window_grid(std::size_t height, std::size_t width, std::size_t window) {
  if (window == 0) throw ConfigError("window size must be positive");
  if (height == 0 || width == 0) throw SizeError("window grid needs a non-empty map");
  WindowGrid g;
  g.height = height;
  g.width = width;
  g.window = window;
  g.pad_bottom = (window - height % window) % window;
  g.pad_right = (window - width % window) % window;
  return g;
}

WindowPartition window_partition(Var x, std::size_t window) {
  if (x.rank() != 3) throw ShapeError("window_partition: expected [H,W,D], got " + shape_str(x.shape()));
  const std::size_t H = x.dim(0), W = x.dim(1), D = x.dim(2);
  const WindowGrid g = make_window_grid(H, W, window);
  const std::size_t M = window;
  std::vector<std::size_t> idx;
  idx.reserve(g.count() * M * M);
  for (std::size_t wy = 0; wy < g.windows_y(); ++wy)
    for (std::size_t wx = 0; wx < g.windows_x(); ++wx)
      for (std::size_t iy = 0; iy < M; ++iy)
        for (std::size_t ix = 0; ix < M; ++ix)
          idx.push_back(fold_index(wy * M + iy, H) * W + fold_index(wx * M + ix, W));
  Var rows = gather_rows(reshape(x, Shape{H * W, D}), std::move(idx));
  return {reshape(rows, Shape{g.count(), M * M, D}), g};
}

Var window_reverse(Var windows, const WindowGrid& g) {
  const std::size_t M = g.window, T = M * M;
  if (windows.rank() != 3 || windows.dim(0) != g.count() || windows.dim(1) != T) {
    throw ShapeError("window_reverse: windows " + shape_str(windows.shape()) + " do not match grid");
  }
  const std::size_t D = windows.dim(2);
  std::vector<std::size_t> idx;
  idx.reserve(g.height * g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x)
      idx.push_back(((y / M) * g.windows_x() + x / M) * T + (y % M) * M + (x % M));
  Var rows = gather_rows(reshape(windows, Shape{g.count() * T, D}), std::move(idx));
  return reshape(rows, Shape{g.height, g.width, D});
}

std::vector<std::size_t> relative_position_index(std::size_t window) {
  const std::size_t M = window, T = M * M, span = 2 * M - 1;
  std::vector<std::size_t> idx(T * T);
  for (std::size_t p = 0; p < T; ++p)
    for (std::size_t q = 0; q < T; ++q) {
      const std::size_t dy = p / M + M - 1 - q / M;
      const std::size_t dx = p % M + M - 1 - q % M;
      idx[p * T + q] = dy * span + dx;
    }
  return idx;
}

// ---------------------------------------------------------------------------
// LongIR mask

LongIRMask build_longir_mask(std::size_t length, std::size_t w, std::size_t d, std::vector<std::size_t> globals) {
  if (length == 0) throw ConfigError("LongIR mask needs a non-empty sequence");
  if (w == 0 || w % 2 == 0) throw ConfigError("LongIR window width must be odd, got " + std::to_string(w));
  if (d == 0) throw ConfigError("LongIR dilation must be at least 1");
  std::sort(globals.begin(), globals.end());
  globals.erase(std::unique(globals.begin(), globals.end()), globals.end());
  if (!globals.empty() && globals.back() >= length) {
    throw ConfigError("global token " + std::to_string(globals.back()) + " outside sequence of length " +
                      std::to_string(length));
  }

  LongIRMask m;
  m.length_ = length;
  m.window_ = w;
  m.dilation_ = d;
  m.globals_ = std::move(globals);
  m.is_global_.assign(length, 0);
  for (auto g : m.globals_) m.is_global_[g] = 1;

  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(w / 2);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(length);
  m.offsets_.reserve(length + 1);
  m.offsets_.push_back(0);
  std::vector<std::size_t> band;
  std::vector<std::size_t> row;
  for (std::size_t i = 0; i < length; ++i) {
    if (m.is_global_[i]) {
      for (std::size_t j = 0; j < length; ++j) m.cols_.push_back(j);
    } else {
      band.clear();
      for (std::ptrdiff_t k = -half; k <= half; ++k) {
        const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + k * static_cast<std::ptrdiff_t>(d);
        if (j >= 0 && j < n) band.push_back(static_cast<std::size_t>(j));
      }
      row.clear();
      std::set_union(band.begin(), band.end(), m.globals_.begin(), m.globals_.end(), std::back_inserter(row));
      m.cols_.insert(m.cols_.end(), row.begin(), row.end());
    }
    m.offsets_.push_back(m.cols_.size());
  }
  return m;
}

bool LongIRMask::admits(std::size_t i, std::size_t j) const {
  if (is_global_[i] || is_global_[j]) return true;
  const std::size_t diff = i > j ? i - j : j - i;
  return diff % dilation_ == 0 && diff / dilation_ <= window_ / 2;
}

BoolTensor LongIRMask::dense() const {
  BoolTensor out(Shape{length_, length_}, false);
  for (std::size_t i = 0; i < length_; ++i)
    for (auto j : admissible(i)) out.data[i * length_ + j] = 1;
  return out;
}

std::vector<std::size_t> window_anchor_globals(std::size_t length, std::size_t window, std::size_t per_window) {
  const std::size_t stride = window * window;
  std::vector<std::size_t> g;
  if (stride == 0) return g;
  for (std::size_t base = 0; base < length; base += stride)
    for (std::size_t j = 0; j < std::min(per_window, stride) && base + j < length; ++j) g.push_back(base + j);
  return g;
}

// ---------------------------------------------------------------------------
// Kernels

Tensor banded_attention_weights(const Tensor& q, const Tensor& k, const LongIRMask& mask, double scale) {
  const std::size_t H = q.dim(0), N = q.dim(1), dh = q.dim(2), P = mask.pair_count();
  Tensor w(Shape{H, P});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < N; ++i) {
      const double* qi = q.data().data() + (h * N + i) * dh;
      const auto cols = mask.admissible(i);
      double* p = w.data().data() + h * P + mask.row_offset(i);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < cols.size(); ++t) {
        const double* kj = k.data().data() + (h * N + cols[t]) * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[t] = s * scale;
        mx = std::max(mx, p[t]);
      }
      double z = 0.0;
      for (std::size_t t = 0; t < cols.size(); ++t) {
        p[t] = std::exp(p[t] - mx);
        z += p[t];
      }
      for (std::size_t t = 0; t < cols.size(); ++t) p[t] /= z;
    }
  }
  return w;
}

Var banded_attention(Var q, Var k, Var v, const LongIRMask& mask, double scale) {
  check_heads(q, k, v, "banded_attention");
  const std::size_t H = q.dim(0), N = q.dim(1), dh = q.dim(2);
  if (N != mask.length()) {
    throw ShapeError("banded_attention: mask length " + std::to_string(mask.length()) + " does not match sequence length " +
                     std::to_string(N));
  }
  const std::size_t P = mask.pair_count();
  auto weights = std::make_shared<Tensor>(banded_attention_weights(q.value(), k.value(), mask, scale));
  const Tensor& V = v.value();
  Tensor out(Shape{H, N, dh}, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < N; ++i) {
      const auto cols = mask.admissible(i);
      const double* p = weights->data().data() + h * P + mask.row_offset(i);
      double* o = out.data().data() + (h * N + i) * dh;
      for (std::size_t t = 0; t < cols.size(); ++t) {
        const double* vj = V.data().data() + (h * N + cols[t]) * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] += p[t] * vj[c];
      }
    }
  mac_counter() += 2 * H * P * dh;

  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, mask = std::make_shared<const LongIRMask>(mask), weights, scale, H, N, dh, P](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
        const Tensor& Q = q.value();
        const Tensor& K = k.value();
        const Tensor& V = v.value();
        std::vector<double> dp;
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t i = 0; i < N; ++i) {
            const auto cols = mask->admissible(i);
            const double* p = weights->data().data() + h * P + mask->row_offset(i);
            const double* gi = g.data().data() + (h * N + i) * dh;
            dp.assign(cols.size(), 0.0);
            double s = 0.0;
            for (std::size_t t = 0; t < cols.size(); ++t) {
              const std::size_t j = (h * N + cols[t]) * dh;
              double acc = 0.0;
              for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * V[j + c];
              dp[t] = acc;
              s += p[t] * acc;
              if (in[2])
                for (std::size_t c = 0; c < dh; ++c) (*in[2])[j + c] += p[t] * gi[c];
            }
            const std::size_t qi = (h * N + i) * dh;
            for (std::size_t t = 0; t < cols.size(); ++t) {
              const double ds = p[t] * (dp[t] - s) * scale;
              const std::size_t j = (h * N + cols[t]) * dh;
              if (in[0])
                for (std::size_t c = 0; c < dh; ++c) (*in[0])[qi + c] += ds * K[j + c];
              if (in[1])
                for (std::size_t c = 0; c < dh; ++c) (*in[1])[j + c] += ds * Q[qi + c];
            }
          }
      });
}

Var dense_masked_attention(Var q, Var k, Var v, const BoolTensor& mask, double scale) {
  check_heads(q, k, v, "dense_masked_attention");
  const std::size_t N = q.dim(1);
  if (mask.shape != Shape{N, N}) {
    throw ShapeError("dense_masked_attention: mask " + shape_str(mask.shape) + " for sequence length " + std::to_string(N));
  }
  Var scores = dart::scale(matmul(q, permute(k, {0, 2, 1})), scale);
  return matmul(masked_softmax_lastdim(scores, &mask), v);
}

// ---------------------------------------------------------------------------
// Parameterised branches

AttentionParams AttentionParams::create(const std::string& prefix, std::size_t dim, std::size_t heads,
                                        std::size_t window, Rng& rng) {
  if (heads == 0 || dim == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  AttentionParams p;
  p.dim = dim;
  p.heads = heads;
  p.window = window;
  auto proj = [&](Parameter& w, Parameter& b, const std::string& name) {
    w = Parameter(prefix + "." + name + ".weight", truncated_normal(Shape{dim, dim}, rng, 0.02));
    b = Parameter(prefix + "." + name + ".bias", Tensor(Shape{dim}, 0.0));
  };
  proj(p.q_weight, p.q_bias, "q");
  proj(p.k_weight, p.k_bias, "k");
  proj(p.v_weight, p.v_bias, "v");
  proj(p.out_weight, p.out_bias, "proj");
  if (window > 0) {
    const std::size_t span = 2 * window - 1;
    p.rel_bias = Parameter(prefix + ".rel_bias", Tensor(Shape{span * span, heads}, 0.0));
  }
  return p;
}

std::vector<Parameter*> AttentionParams::parameters() {
  std::vector<Parameter*> ps{&q_weight, &q_bias, &k_weight, &k_bias, &v_weight, &v_bias, &out_weight, &out_bias};
  if (rel_bias) ps.push_back(&*rel_bias);
  return ps;
}

namespace {

struct Projected {
  Var q, k, v;
};

Projected project(Var x, AttentionParams& p) {
  if (x.shape().back() != p.dim) {
    throw ShapeError("attention input " + shape_str(x.shape()) + " does not match model dim " + std::to_string(p.dim));
  }
  Tape& t = x.tape();
  return {split_heads(linear(x, t.param(p.q_weight), t.param(p.q_bias)), p.heads),
          split_heads(linear(x, t.param(p.k_weight), t.param(p.k_bias)), p.heads),
          split_heads(linear(x, t.param(p.v_weight), t.param(p.v_bias)), p.heads)};
}

Var output_projection(Var heads_out, AttentionParams& p) {
  Tape& t = heads_out.tape();
  return linear(merge_heads(heads_out), t.param(p.out_weight), t.param(p.out_bias));
}

}  // namespace

Var window_attention(Var windows, AttentionParams& p) {
  if (windows.rank() != 3) throw ShapeError("window_attention: expected [nW,T,D], got " + shape_str(windows.shape()));
  if (!p.rel_bias || p.window * p.window != windows.dim(1)) {
    throw ShapeError("window_attention: window tokens " + std::to_string(windows.dim(1)) +
                     " do not match the parameters' window size " + std::to_string(p.window));
  }
  Tape& t = windows.tape();
  const std::size_t T = windows.dim(1);
  const double sc = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
  auto [q, k, v] = project(windows, p);
  Var scores = dart::scale(matmul(q, permute(k, {0, 1, 3, 2})), sc);  // [nW,h,T,T]
  Var bias = gather_rows(t.param(*p.rel_bias), relative_position_index(p.window));  // [T*T, h]
  bias = reshape(permute(bias, {1, 0}), Shape{p.heads, T, T});
  Var attn = masked_softmax_lastdim(add(scores, bias));
  return output_projection(matmul(attn, v), p);
}

Var longir_attention(Var x, const LongIRMask& mask, AttentionParams& p) {
  if (x.rank() != 2) throw ShapeError("longir_attention: expected [N,D], got " + shape_str(x.shape()));
  if (x.dim(0) != mask.length()) {
    throw ShapeError("longir_attention: mask length " + std::to_string(mask.length()) + " does not match sequence length " +
                     std::to_string(x.dim(0)));
  }
  auto [q, k, v] = project(x, p);
  const double sc = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
  return output_projection(banded_attention(q, k, v, mask, sc), p);
}

Var longir_attention_dense(Var x, const LongIRMask& mask, AttentionParams& p) {
  if (x.rank() != 2) throw ShapeError("longir_attention_dense: expected [N,D], got " + shape_str(x.shape()));
  if (x.dim(0) != mask.length()) {
    throw ShapeError("longir_attention_dense: mask length " + std::to_string(mask.length()) +
                     " does not match sequence length " + std::to_string(x.dim(0)));
  }
  auto [q, k, v] = project(x, p);
  const double sc = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
  return output_projection(dense_masked_attention(q, k, v, mask.dense(), sc), p);
}

FusionParams FusionParams::create(const std::string& prefix, std::size_t dim, Rng& rng) {
  return {Parameter(prefix + ".weight", truncated_normal(Shape{dim, 2 * dim}, rng, 0.02)),
          Parameter(prefix + ".bias", Tensor(Shape{dim}, 0.0))};
}

Var fuse_branches(Var x_win, Var x_long, FusionParams& p) {
  if (x_win.shape() != x_long.shape()) {
    throw ShapeError("fuse_branches: branches are not token-aligned: " + shape_str(x_win.shape()) + " vs " +
                     shape_str(x_long.shape()));
  }
  Tape& t = x_win.tape();
  return linear(concat({x_win, x_long}, x_win.rank() - 1), t.param(p.weight), t.param(p.bias));
}

}  // namespace dart
