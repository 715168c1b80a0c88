#include "dart/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace dart {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = tracking_;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = tracking_;
  n.param = tracking_ ? &p : nullptr;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite value produced on tape (op " + std::to_string(nodes_.size()) + ")");
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (&v.tape() != this) throw Error("op inputs belong to a different tape");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw Error("backward root belongs to a different tape");
  auto& r = nodes_.at(root.id());
  if (r.value.size() != 1) throw ShapeError("backward root must be scalar, got " + shape_str(r.value.shape()));
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& in = nodes_[n.inputs[k]];
        if (!in.requires_grad) continue;
        if (in.grad.empty()) in.grad = Tensor(in.value.shape(), 0.0);
        slots[k] = &in.grad;
      }
      n.backward(n.grad, n.value, slots);
    }
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// helpers

namespace {

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.begin(), suffix.end(), full.end() - static_cast<std::ptrdiff_t>(suffix.size()));
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data().data();
  const double* s = src.data().data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

Tape& tape_of(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("op inputs belong to a different tape");
  return a.tape();
}

template <typename F>
Var unary(Var a, F&& f, BackwardFn backward) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape().record(std::move(out), {a}, std::move(backward));
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!is_suffix(A.shape(), B.shape())) {
    throw ShapeError("add: " + shape_str(B.shape()) + " does not broadcast onto " + shape_str(A.shape()));
  }
  const std::size_t n = B.size();
  const std::size_t reps = A.size() / n;
  Tensor out = A;
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] += B[i];
  return t.record(std::move(out), {a, b}, [n, reps](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    if (in[0]) add_into(*in[0], g);
    if (in[1]) {
      Tensor& gb = *in[1];
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[r * n + i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return t.record(std::move(out), {a, b}, [](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    if (in[0]) add_into(*in[0], g);
    if (in[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!is_suffix(A.shape(), B.shape())) {
    throw ShapeError("mul: " + shape_str(B.shape()) + " does not broadcast onto " + shape_str(A.shape()));
  }
  const std::size_t n = B.size();
  const std::size_t reps = A.size() / n;
  Tensor out = A;
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] *= B[i];
  return t.record(std::move(out), {a, b}, [a, b, n, reps](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    for (std::size_t r = 0; r < reps; ++r) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = r * n + i;
        if (in[0]) (*in[0])[k] += g[k] * B[i];
        if (in[1]) (*in[1])[i] += g[k] * A[k];
      }
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    add_into(*in[0], g);
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](const Tensor& g, const Tensor& out, std::span<Tensor* const> in) {
                 for (std::size_t i = 0; i < g.size(); ++i)
                   if (out[i] > 0.0) (*in[0])[i] += g[i];
               });
}

Var sigmoid(Var a) {
  // Clamped to the open interval so saturated gates never reach exactly 0 or 1.
  const double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return unary(a,
               [lo, hi](double x) {
                 const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                 return std::clamp(s, lo, hi);
               },
               [](const Tensor& g, const Tensor& out, std::span<Tensor* const> in) {
                 for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * out[i] * (1.0 - out[i]);
               });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
               [a, inv_sqrt_2pi](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
                 const Tensor& x = a.value();
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   const double v = x[i];
                   const double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
                   (*in[0])[i] += g[i] * d;
                 }
               });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    const double gv = g[0];
    for (auto& v : in[0]->data()) v += gv;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s / n), {a}, [n](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    const double gv = g[0] / n;
    for (auto& v : in[0]->data()) v += gv;
  });
}

// ---------------------------------------------------------------------------
// matmul / linear

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  auto mismatch = [&] {
    return ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  };
  if (A.rank() < 2 || B.rank() < 2) throw mismatch();
  const std::size_t M = A.dim(A.rank() - 2);
  const std::size_t K = A.dim(A.rank() - 1);
  const std::size_t N = B.dim(B.rank() - 1);
  if (B.dim(B.rank() - 2) != K) throw mismatch();
  const bool shared_b = B.rank() == 2;
  if (!shared_b && !std::equal(A.shape().begin(), A.shape().end() - 2, B.shape().begin(), B.shape().end() - 2)) {
    throw mismatch();
  }
  if (!shared_b && A.rank() != B.rank()) throw mismatch();
  const std::size_t batch = A.size() / (M * K);

  Shape out_shape = A.shape();
  out_shape.back() = N;
  Tensor out(out_shape);
  if (shared_b) {
    MapMat(out.data().data(), batch * M, N).noalias() =
        CMapMat(A.data().data(), batch * M, K) * CMapMat(B.data().data(), K, N);
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      MapMat(out.data().data() + s * M * N, M, N).noalias() =
          CMapMat(A.data().data() + s * M * K, M, K) * CMapMat(B.data().data() + s * K * N, K, N);
    }
  }
  mac_counter() += batch * M * K * N;

  return t.record(std::move(out), {a, b},
                  [a, b, M, K, N, batch, shared_b](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
                    const Tensor& A = a.value();
                    const Tensor& B = b.value();
                    if (shared_b) {
                      CMapMat G(g.data().data(), batch * M, N);
                      if (in[0]) MapMat(in[0]->data().data(), batch * M, K).noalias() += G * CMapMat(B.data().data(), K, N).transpose();
                      if (in[1]) MapMat(in[1]->data().data(), K, N).noalias() += CMapMat(A.data().data(), batch * M, K).transpose() * G;
                      return;
                    }
                    for (std::size_t s = 0; s < batch; ++s) {
                      CMapMat G(g.data().data() + s * M * N, M, N);
                      if (in[0])
                        MapMat(in[0]->data().data() + s * M * K, M, K).noalias() +=
                            G * CMapMat(B.data().data() + s * K * N, K, N).transpose();
                      if (in[1])
                        MapMat(in[1]->data().data() + s * K * N, K, N).noalias() +=
                            CMapMat(A.data().data() + s * M * K, M, K).transpose() * G;
                    }
                  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  Tape& t = tape_of(x, weight);
  const Tensor& X = x.value();
  const Tensor& Wt = weight.value();
  if (X.rank() < 1 || Wt.rank() != 2 || Wt.dim(1) != X.shape().back()) {
    throw ShapeError("linear: input " + shape_str(X.shape()) + " incompatible with weight " + shape_str(Wt.shape()));
  }
  const std::size_t in_f = Wt.dim(1);
  const std::size_t out_f = Wt.dim(0);
  const std::size_t rows = X.size() / in_f;
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_f)) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " for weight " + shape_str(Wt.shape()));
  }
  Shape out_shape = X.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  MapMat Y(out.data().data(), rows, out_f);
  Y.noalias() = CMapMat(X.data().data(), rows, in_f) * CMapMat(Wt.data().data(), out_f, in_f).transpose();
  if (bias) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value().data().data(), out_f);
  mac_counter() += rows * in_f * out_f;

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return t.record(std::move(out), std::move(inputs),
                  [x, weight, rows, in_f, out_f](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
                    CMapMat G(g.data().data(), rows, out_f);
                    if (in[0])
                      MapMat(in[0]->data().data(), rows, in_f).noalias() +=
                          G * CMapMat(weight.value().data().data(), out_f, in_f);
                    if (in[1])
                      MapMat(in[1]->data().data(), out_f, in_f).noalias() +=
                          G.transpose() * CMapMat(x.value().data().data(), rows, in_f);
                    if (in.size() > 2 && in[2]) {
                      // Plain loop: Eigen reductions peel by buffer alignment,
                      // which makes the summation order address-dependent.
                      double* db = in[2]->data().data();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t o = 0; o < out_f; ++o) db[o] += g[r * out_f + o];
                    }
                  });
}

// ---------------------------------------------------------------------------
// softmax

Var masked_softmax_lastdim(Var x, const BoolTensor* mask) {
  const Tensor& X = x.value();
  if (X.rank() < 1) throw ShapeError("masked_softmax_lastdim: scalar input");
  const std::size_t L = X.shape().back();
  const std::size_t rows = X.size() / L;
  std::size_t mask_rows = 0;
  if (mask) {
    if (mask->shape.empty() || !is_suffix(X.shape(), mask->shape)) {
      throw ShapeError("masked_softmax_lastdim: mask " + shape_str(mask->shape) + " does not match " + shape_str(X.shape()));
    }
    mask_rows = mask->data.size() / L;
  }
  Tensor out(X.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * L;
    double* o = out.data().data() + r * L;
    const std::uint8_t* m = mask ? mask->data.data() + (r % mask_rows) * L : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < L; ++j)
      if (!m || m[j]) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericError("masked_softmax_lastdim: row " + std::to_string(r) + " has no admissible position");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      if (m && !m[j]) continue;
      o[j] = std::exp(xr[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < L; ++j) o[j] /= z;
  }
  return x.tape().record(std::move(out), {x}, [L, rows](const Tensor& g, const Tensor& p, std::span<Tensor* const> in) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* pr = p.data().data() + r * L;
      const double* gr = g.data().data() + r * L;
      double dot = 0.0;
      for (std::size_t j = 0; j < L; ++j) dot += pr[j] * gr[j];
      double* d = in[0]->data().data() + r * L;
      for (std::size_t j = 0; j < L; ++j) d[j] += pr[j] * (gr[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

std::size_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

Var conv2d(Var input, Var kernel, std::optional<Var> bias) {
  Tape& t = tape_of(input, kernel);
  const Tensor& X = input.value();
  const Tensor& Kt = kernel.value();
  if (Kt.rank() != 4 || Kt.dim(2) != Kt.dim(3)) throw ShapeError("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_str(Kt.shape()));
  const std::size_t k = Kt.dim(2);
  if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (X.rank() != 3 || X.dim(0) != Kt.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(X.shape()) + " incompatible with kernel " + shape_str(Kt.shape()));
  }
  const std::size_t cin = X.dim(0), H = X.dim(1), W = X.dim(2), cout = Kt.dim(0);
  const std::size_t pad = k / 2;
  if (H <= pad || W <= pad) {
    throw SizeError("conv2d: input " + shape_str(X.shape()) + " too small for reflect padding of a " + std::to_string(k) +
                    "x" + std::to_string(k) + " kernel");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()));

  // Source index tables: ry[y*k+ky] = reflected row of y+ky-pad.
  std::vector<std::size_t> ry(H * k), rx(W * k);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t ky = 0; ky < k; ++ky)
      ry[y * k + ky] = reflect(static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad), static_cast<std::ptrdiff_t>(H));
  for (std::size_t x = 0; x < W; ++x)
    for (std::size_t kx = 0; kx < k; ++kx)
      rx[x * k + kx] = reflect(static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad), static_cast<std::ptrdiff_t>(W));

  const std::size_t HW = H * W;
  const std::size_t patch = cin * k * k;
  auto cols = std::make_shared<std::vector<double>>(patch * HW);
  {
    double* c = cols->data();
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = X.data().data() + ci * HW;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          for (std::size_t y = 0; y < H; ++y) {
            const double* srow = src + ry[y * k + ky] * W;
            for (std::size_t x = 0; x < W; ++x) *c++ = srow[rx[x * k + kx]];
          }
        }
    }
  }
  Tensor out(Shape{cout, H, W});
  MapMat Y(out.data().data(), cout, HW);
  Y.noalias() = CMapMat(Kt.data().data(), cout, patch) * CMapMat(cols->data(), patch, HW);
  if (bias) Y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias->value().data().data(), cout);
  mac_counter() += cout * patch * HW;

  std::vector<Var> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return t.record(std::move(out), std::move(inputs),
                  [kernel, cols, ry = std::move(ry), rx = std::move(rx), cin, cout, H, W, k, HW, patch](
                      const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
                    CMapMat G(g.data().data(), cout, HW);
                    if (in[1]) MapMat(in[1]->data().data(), cout, patch).noalias() += G * CMapMat(cols->data(), patch, HW).transpose();
                    if (in.size() > 2 && in[2]) {
                      for (std::size_t o = 0; o < cout; ++o) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < HW; ++i) acc += g[o * HW + i];
                        (*in[2])[o] += acc;
                      }
                    }
                    if (in[0]) {
                      RowMat dcols = CMapMat(kernel.value().data().data(), cout, patch).transpose() * G;
                      const double* c = dcols.data();
                      for (std::size_t ci = 0; ci < cin; ++ci) {
                        double* dst = in[0]->data().data() + ci * HW;
                        for (std::size_t ky = 0; ky < k; ++ky)
                          for (std::size_t kx = 0; kx < k; ++kx)
                            for (std::size_t y = 0; y < H; ++y) {
                              double* drow = dst + ry[y * k + ky] * W;
                              for (std::size_t x = 0; x < W; ++x) drow[rx[x * k + kx]] += *c++;
                            }
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// layer norm

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  const Tensor& X = x.value();
  if (X.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t D = X.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " for input " + shape_str(X.shape()));
  }
  const std::size_t rows = X.size() / D;
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < D; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * D + j] = h;
      out[r * D + j] = G[j] * h + B[j];
    }
  }
  return t.record(std::move(out), {x, gamma, beta},
                  [gamma, xhat, rstd, rows, D](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
                    const Tensor& G = gamma.value();
                    std::vector<double> dxh(D);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* gr = g.data().data() + r * D;
                      const double* hr = xhat->data() + r * D;
                      if (in[1])
                        for (std::size_t j = 0; j < D; ++j) (*in[1])[j] += gr[j] * hr[j];
                      if (in[2])
                        for (std::size_t j = 0; j < D; ++j) (*in[2])[j] += gr[j];
                      if (!in[0]) continue;
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < D; ++j) {
                        dxh[j] = gr[j] * G[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * hr[j];
                      }
                      m1 /= static_cast<double>(D);
                      m2 /= static_cast<double>(D);
                      double* d = in[0]->data().data() + r * D;
                      for (std::size_t j = 0; j < D; ++j) d[j] += (*rstd)[r] * (dxh[j] - m1 - hr[j] * m2);
                    }
                  });
}

// ---------------------------------------------------------------------------
// pooling and gating

namespace {

void require_chw(const Tensor& X, const char* op) {
  if (X.rank() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W], got " + shape_str(X.shape()));
}

}  // namespace

Var global_avg_pool(Var x) {
  const Tensor& X = x.value();
  require_chw(X, "global_avg_pool");
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor out(Shape{C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += X[c * HW + i];
    out[c] = s / static_cast<double>(HW);
  }
  return x.tape().record(std::move(out), {x}, [C, HW](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    for (std::size_t c = 0; c < C; ++c) {
      const double v = g[c] / static_cast<double>(HW);
      for (std::size_t i = 0; i < HW; ++i) (*in[0])[c * HW + i] += v;
    }
  });
}

Var global_max_pool(Var x) {
  const Tensor& X = x.value();
  require_chw(X, "global_max_pool");
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor out(Shape{C});
  std::vector<std::size_t> arg(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < HW; ++i)
      if (X[c * HW + i] > X[c * HW + best]) best = i;
    arg[c] = c * HW + best;
    out[c] = X[arg[c]];
  }
  return x.tape().record(std::move(out), {x}, [arg = std::move(arg)](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    for (std::size_t c = 0; c < arg.size(); ++c) (*in[0])[arg[c]] += g[c];
  });
}

Var channel_mean(Var x) {
  const Tensor& X = x.value();
  require_chw(X, "channel_mean");
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor out(Shape{1, X.dim(1), X.dim(2)}, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[i] += X[c * HW + i];
  for (std::size_t i = 0; i < HW; ++i) out[i] /= static_cast<double>(C);
  return x.tape().record(std::move(out), {x}, [C, HW](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) (*in[0])[c * HW + i] += g[i] / static_cast<double>(C);
  });
}

Var channel_max(Var x) {
  const Tensor& X = x.value();
  require_chw(X, "channel_max");
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor out(Shape{1, X.dim(1), X.dim(2)});
  std::vector<std::size_t> arg(HW);
  for (std::size_t i = 0; i < HW; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (X[c * HW + i] > X[best * HW + i]) best = c;
    arg[i] = best * HW + i;
    out[i] = X[arg[i]];
  }
  return x.tape().record(std::move(out), {x}, [arg = std::move(arg)](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < arg.size(); ++i) (*in[0])[arg[i]] += g[i];
  });
}

Var mul_channels(Var x, Var gate) {
  Tape& t = tape_of(x, gate);
  const Tensor& X = x.value();
  const Tensor& Gt = gate.value();
  if (X.rank() < 1 || Gt.rank() != 1 || Gt.dim(0) != X.dim(0)) {
    throw ShapeError("mul_channels: gate " + shape_str(Gt.shape()) + " for input " + shape_str(X.shape()));
  }
  const std::size_t C = X.dim(0), inner = X.size() / C;
  Tensor out = X;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] *= Gt[c];
  return t.record(std::move(out), {x, gate}, [x, gate, C, inner](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    const Tensor& X = x.value();
    const Tensor& Gt = gate.value();
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = c * inner + i;
        if (in[0]) (*in[0])[k] += g[k] * Gt[c];
        acc += g[k] * X[k];
      }
      if (in[1]) (*in[1])[c] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// layout

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    add_into(*in[0], g);
  });
}

Var permute(Var x, const std::vector<std::size_t>& axes) {
  const Tensor& X = x.value();
  const std::size_t r = X.rank();
  if (axes.size() != r) throw ShapeError("permute: axes rank mismatch for " + shape_str(X.shape()));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis order for " + shape_str(X.shape()));
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * X.dim(i);
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = X.dim(axes[i]);
    stride[i] = in_stride[axes[i]];
  }
  // Visits (output index, source offset) pairs in output order.
  auto walk = [out_shape, stride, r](std::size_t n, auto&& visit) {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < n; ++k) {
      visit(k, off);
      for (std::size_t d = r; d-- > 0;) {
        off += stride[d];
        if (++idx[d] < out_shape[d]) break;
        off -= stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  };
  Tensor out(out_shape);
  walk(X.size(), [&](std::size_t k, std::size_t off) { out[k] = X[off]; });
  return x.tape().record(std::move(out), {x}, [walk](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    walk(g.size(), [&](std::size_t k, std::size_t off) { (*in[0])[off] += g[k]; });
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (&p.tape() != &parts[0].tape()) throw Error("concat: inputs belong to different tapes");
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(s0));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    widths.push_back(s[axis] * inner);
    out_shape[axis] += s[axis];
  }
  const std::size_t row = out_shape[axis] * inner;
  Tensor out(out_shape);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data().data() + o * widths[p], widths[p], out.data().data() + o * row + col);
    col += widths[p];
  }
  return parts[0].tape().record(std::move(out), parts, [widths, outer, row](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    std::size_t col = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (in[p])
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[p]; ++i) (*in[p])[o * widths[p] + i] += g[o * row + col + i];
      col += widths[p];
    }
  });
}

Var gather_rows(Var x, std::vector<std::size_t> indices) {
  const Tensor& X = x.value();
  if (X.rank() < 1) throw ShapeError("gather_rows: scalar input");
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t R = X.dim(0), row = X.size() / R;
  for (auto i : indices)
    if (i >= R) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(X.shape()));
  Shape out_shape = X.shape();
  out_shape[0] = indices.size();
  Tensor out(out_shape);
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy_n(X.data().data() + indices[k] * row, row, out.data().data() + k * row);
  return x.tape().record(std::move(out), {x}, [idx = std::move(indices), row](const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      double* d = in[0]->data().data() + idx[k] * row;
      const double* s = g.data().data() + k * row;
      for (std::size_t i = 0; i < row; ++i) d[i] += s[i];
    }
  });
}

// ---------------------------------------------------------------------------
// gradient check

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, std::span<Parameter* const> params, double h) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    if (!std::isfinite(l.value().item())) throw NumericError("grad_check: non-finite loss");
    tape.backward(l);
  }
  auto eval = [&] {
    Tape tape(false);
    const double v = loss(tape).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss under perturbation");
    return v;
  };

  GradCheckReport report;
  for (auto* p : params) {
    GradCheckEntry e;
    e.name = p->name;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = eval();
      p->value[i] = orig - h;
      const double fm = eval();
      p->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double rel = relative_error(p->grad[i], numeric);
      if (rel > e.max_rel_error || i == 0) {
        e.max_rel_error = std::max(rel, e.max_rel_error);
        if (rel >= e.max_rel_error) {
          e.worst_index = i;
          e.analytic = p->grad[i];
          e.numeric = numeric;
        }
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace dart
