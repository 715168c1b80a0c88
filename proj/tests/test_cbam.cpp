#include <algorithm>
#include <cmath>

#include "dart/cbam.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dart;
using dart::test::probe;
using dart::test::random_tensor;

namespace {

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Channel attention written out with scalar loops over a [C,H,W] buffer.
std::vector<double> channel_gate_oracle(const Tensor& F, const ChannelAttnParams& p) {
  const std::size_t C = F.dim(0), HW = F.dim(1) * F.dim(2), R = C / p.reduction;
  std::vector<double> avg(C, 0.0), mx(C, -1e300);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) {
      avg[c] += F[c * HW + i] / static_cast<double>(HW);
      mx[c] = std::max(mx[c], F[c * HW + i]);
    }
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> hidden(R, 0.0), out(C, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) hidden[r] += p.w0.value[r * C + c] * v[c];
      hidden[r] = std::max(0.0, hidden[r]);
    }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r < R; ++r) out[c] += p.w1.value[c * R + r] * hidden[r];
    return out;
  };
  const auto a = mlp(avg), b = mlp(mx);
  std::vector<double> gate(C);
  for (std::size_t c = 0; c < C; ++c) gate[c] = sigm(a[c] + b[c]);
  return gate;
}

long mirror(long i, long n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// Spatial attention with a direct 7x7 reflect-padded correlation.
std::vector<double> spatial_gate_oracle(const Tensor& F, const SpatialAttnParams& p) {
  const long C = static_cast<long>(F.dim(0)), H = static_cast<long>(F.dim(1)), W = static_cast<long>(F.dim(2));
  std::vector<double> mean(H * W, 0.0), mx(H * W, -1e300);
  for (long c = 0; c < C; ++c)
    for (long i = 0; i < H * W; ++i) {
      mean[i] += F[c * H * W + i] / static_cast<double>(C);
      mx[i] = std::max(mx[i], F[c * H * W + i]);
    }
  std::vector<double> gate(H * W);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double s = p.bias.value[0];
      for (long ky = 0; ky < 7; ++ky)
        for (long kx = 0; kx < 7; ++kx) {
          const long sy = mirror(y + ky - 3, H), sx = mirror(x + kx - 3, W);
          s += p.weight.value[(0 * 7 + ky) * 7 + kx] * mean[sy * W + sx];
          s += p.weight.value[(1 * 7 + ky) * 7 + kx] * mx[sy * W + sx];
        }
      gate[y * W + x] = sigm(s);
    }
  return gate;
}

struct Fixture {
  Rng init{0};
  ChannelAttnParams cp = ChannelAttnParams::create("ca", 8, 4, init);
  SpatialAttnParams sp = SpatialAttnParams::create("sa", init);
};

}  // namespace

TEST_SUITE("cbam") {

TEST_CASE("zeroed channel network halves the feature") {
  Fixture f;
  f.cp.w0.value.fill(0.0);
  f.cp.w1.value.fill(0.0);
  std::mt19937_64 rng(1);
  Tape tape;
  const Tensor F = random_tensor(Shape{8, 5, 6}, rng);
  auto r = channel_attention(tape.constant(F), f.cp);
  for (double g : r.gate.value().data()) CHECK(g == 0.5);
  for (std::size_t i = 0; i < F.size(); ++i) CHECK(r.out.value()[i] == 0.5 * F[i]);
}

TEST_CASE("spatially constant input pools identically") {
  Fixture f;
  std::mt19937_64 rng(2);
  f.cp.w0.value = random_tensor(f.cp.w0.value.shape(), rng);
  f.cp.w1.value = random_tensor(f.cp.w1.value.shape(), rng);
  Tensor F(Shape{8, 4, 4});
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < 16; ++i) F[c * 16 + i] = 0.1 * static_cast<double>(c) - 0.3;
  Tape tape;
  const Tensor gate = channel_attention(tape.constant(F), f.cp).gate.value();
  // sigma(2 * MLP(v)) with v the per-channel constant
  std::vector<double> v(8);
  for (std::size_t c = 0; c < 8; ++c) v[c] = F[c * 16];
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 2; ++r) {
      double h = 0.0;
      for (std::size_t k = 0; k < 8; ++k) h += f.cp.w0.value[r * 8 + k] * v[k];
      s += f.cp.w1.value[c * 2 + r] * std::max(0.0, h);
    }
    CHECK(gate[c] == doctest::Approx(sigm(2.0 * s)).epsilon(1e-13));
  }
}

TEST_CASE("channel attention matches the scalar-loop oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Fixture f;
    f.cp.w0.value = random_tensor(f.cp.w0.value.shape(), rng);
    f.cp.w1.value = random_tensor(f.cp.w1.value.shape(), rng);
    const Tensor F = random_tensor(Shape{8, 6, 5}, rng, -2, 2);
    Tape tape;
    auto r = channel_attention(tape.constant(F), f.cp);
    const auto gate = channel_gate_oracle(F, f.cp);
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(std::abs(r.gate.value()[c] - gate[c]) <= 1e-12);
      for (std::size_t i = 0; i < 30; ++i) CHECK(std::abs(r.out.value()[c * 30 + i] - gate[c] * F[c * 30 + i]) <= 1e-12);
    }
  }
}

TEST_CASE("channel attention rejects indivisible channel counts") {
  Rng init(0);
  CHECK_THROWS_AS(ChannelAttnParams::create("ca", 6, 4, init), ConfigError);
}

TEST_CASE("zeroed spatial network halves the feature") {
  Fixture f;
  f.sp.weight.value.fill(0.0);
  std::mt19937_64 rng(4);
  const Tensor F = random_tensor(Shape{3, 4, 7}, rng);
  Tape tape;
  auto r = spatial_attention(tape.constant(F), f.sp);
  CHECK(r.gate.shape() == Shape{1, 4, 7});
  for (double g : r.gate.value().data()) CHECK(g == 0.5);
  for (std::size_t i = 0; i < F.size(); ++i) CHECK(r.out.value()[i] == 0.5 * F[i]);
}

TEST_CASE("saturated spatial bias opens the gate") {
  Fixture f;
  f.sp.weight.value.fill(0.0);
  f.sp.bias.value[0] = 20.0;
  std::mt19937_64 rng(5);
  const Tensor F = random_tensor(Shape{3, 6, 6}, rng);
  Tape tape;
  auto r = spatial_attention(tape.constant(F), f.sp);
  for (double g : r.gate.value().data()) CHECK(g == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(max_abs_diff(r.out.value(), F) <= 1e-8);
}

TEST_CASE("spatial attention matches the scalar-loop oracle") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    Fixture f;
    f.sp.weight.value = random_tensor(f.sp.weight.value.shape(), rng);
    f.sp.bias.value = random_tensor(Shape{1}, rng);
    const Tensor F = random_tensor(Shape{5, 7, 9}, rng, -2, 2);
    Tape tape;
    auto r = spatial_attention(tape.constant(F), f.sp);
    const auto gate = spatial_gate_oracle(F, f.sp);
    for (std::size_t i = 0; i < 63; ++i) {
      CHECK(std::abs(r.gate.value()[i] - gate[i]) <= 1e-12);
      for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(r.out.value()[c * 63 + i] - gate[i] * F[c * 63 + i]) <= 1e-12);
    }
  }
}

TEST_CASE("spatial attention needs 4x4 maps") {
  Fixture f;
  Tape tape;
  CHECK_THROWS_AS(spatial_attention(tape.constant(Tensor(Shape{2, 3, 8})), f.sp), SizeError);
  CHECK_NOTHROW(spatial_attention(tape.constant(Tensor(Shape{2, 4, 4})), f.sp));
}

TEST_CASE("cbam_refine composes channel then spatial") {
  std::mt19937_64 rng(7);
  Fixture f;
  SUBCASE("zeroed networks quarter the feature") {
    f.cp.w0.value.fill(0.0);
    f.cp.w1.value.fill(0.0);
    f.sp.weight.value.fill(0.0);
    const Tensor F = random_tensor(Shape{8, 4, 5}, rng);
    Tape tape;
    const Tensor out = cbam_refine(tape.constant(F), f.cp, f.sp).value();
    for (std::size_t i = 0; i < F.size(); ++i) CHECK(out[i] == 0.25 * F[i]);
  }
  SUBCASE("saturated gates pass the feature through") {
    f.cp.w0.value.fill(10.0);
    f.cp.w1.value.fill(10.0);
    f.sp.weight.value.fill(0.0);
    f.sp.bias.value[0] = 40.0;
    const Tensor F = random_tensor(Shape{8, 4, 5}, rng, 0.5, 1.0);
    Tape tape;
    CHECK(max_abs_diff(cbam_refine(tape.constant(F), f.cp, f.sp).value(), F) <= 1e-12);
  }
  SUBCASE("random case equals the composed oracles") {
    f.cp.w0.value = random_tensor(f.cp.w0.value.shape(), rng);
    f.cp.w1.value = random_tensor(f.cp.w1.value.shape(), rng);
    f.sp.weight.value = random_tensor(f.sp.weight.value.shape(), rng);
    const Tensor F = random_tensor(Shape{8, 5, 5}, rng);
    Tape tape;
    const Tensor out = cbam_refine(tape.constant(F), f.cp, f.sp).value();
    const auto cg = channel_gate_oracle(F, f.cp);
    Tensor mid = F;
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t i = 0; i < 25; ++i) mid[c * 25 + i] *= cg[c];
    const auto sg = spatial_gate_oracle(mid, f.sp);
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t i = 0; i < 25; ++i) CHECK(std::abs(out[c * 25 + i] - sg[i] * mid[c * 25 + i]) <= 1e-12);
  }
}

TEST_CASE("gates stay strictly inside (0,1)") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Fixture f;
    f.cp.w0.value = random_tensor(f.cp.w0.value.shape(), rng, -50, 50);
    f.cp.w1.value = random_tensor(f.cp.w1.value.shape(), rng, -50, 50);
    f.sp.weight.value = random_tensor(f.sp.weight.value.shape(), rng, -50, 50);
    const Tensor F = random_tensor(Shape{8, 5, 5}, rng, -20, 20);
    Tape tape;
    auto c = channel_attention(tape.constant(F), f.cp);
    auto s = spatial_attention(c.out, f.sp);
    for (double g : c.gate.value().data()) CHECK((g > 0.0 && g < 1.0));
    for (double g : s.gate.value().data()) CHECK((g > 0.0 && g < 1.0));
  }
}

TEST_CASE("channel gate is equivariant under channel permutation") {
  std::mt19937_64 rng(9);
  Fixture f;
  f.cp.w0.value = random_tensor(f.cp.w0.value.shape(), rng);
  f.cp.w1.value = random_tensor(f.cp.w1.value.shape(), rng);
  const Tensor F = random_tensor(Shape{8, 3, 4}, rng);
  std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  Fixture g;
  Tensor Fp(F.shape());
  for (std::size_t c = 0; c < 8; ++c) {
    std::copy_n(F.data().begin() + perm[c] * 12, 12, Fp.data().begin() + c * 12);
    for (std::size_t r = 0; r < 2; ++r) {
      g.cp.w0.value[r * 8 + c] = f.cp.w0.value[r * 8 + perm[c]];
      g.cp.w1.value[c * 2 + r] = f.cp.w1.value[perm[c] * 2 + r];
    }
  }
  Tape tape;
  const Tensor a = channel_attention(tape.constant(F), f.cp).gate.value();
  const Tensor b = channel_attention(tape.constant(Fp), g.cp).gate.value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(b[c] == doctest::Approx(a[perm[c]]).epsilon(1e-14));
}

TEST_CASE("channel argmax is invariant to positive scaling") {
  std::mt19937_64 rng(10);
  const Tensor F = random_tensor(Shape{6, 4, 4}, rng);
  for (double lambda : {0.01, 0.5, 3.0, 250.0}) {
    Tape tape;
    Var a = tape.constant(F);
    Var b = dart::scale(a, lambda);
    const Tensor ma = channel_max(a).value();
    const Tensor mb = channel_max(b).value();
    for (std::size_t i = 0; i < 16; ++i) {
      std::size_t ia = 0, ib = 0;
      for (std::size_t c = 1; c < 6; ++c) {
        if (F[c * 16 + i] > F[ia * 16 + i]) ia = c;
        if (b.value()[c * 16 + i] > b.value()[ib * 16 + i]) ib = c;
      }
      CHECK(ia == ib);
      CHECK(mb[i] == doctest::Approx(lambda * ma[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("cbam_refine passes grad_check") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 20);
    Fixture f;
    f.cp.w0.value = random_tensor(f.cp.w0.value.shape(), rng);
    f.cp.w1.value = random_tensor(f.cp.w1.value.shape(), rng);
    f.sp.weight.value = random_tensor(f.sp.weight.value.shape(), rng, -0.3, 0.3);
    Parameter x("x", random_tensor(Shape{8, 5, 6}, rng));
    std::vector<Parameter*> ps{&x, &f.cp.w0, &f.cp.w1, &f.sp.weight, &f.sp.bias};
    const auto report = grad_check([&](Tape& t) { return probe(cbam_refine(t.param(x), f.cp, f.sp), seed); }, ps);
    INFO("seed " << seed << " max rel err " << report.max_rel_error);
    CHECK(report.passed(1e-4));
  }
}

}  // TEST_SUITE
