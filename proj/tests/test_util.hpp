#pragma once

#include <random>

#include "dart/autograd.hpp"

namespace dart::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline Parameter random_param(const std::string& name, Shape shape, std::mt19937_64& rng, double lo = -1.0,
                              double hi = 1.0) {
  return Parameter(name, random_tensor(std::move(shape), rng, lo, hi));
}

/// Scalar probe: sum(out * weights) with fixed pseudo-random weights, so every
/// output element contributes to the gradient with a distinct coefficient.
/// Weights are kept at 1e-3 scale: the finite-difference roundoff then stays
/// well under the 1e-8 absolute floor of relative_error, which matters for
/// parameters whose exact gradient is zero (e.g. key biases under softmax).
inline Var probe(Var out, std::uint64_t seed = 99, double magnitude = 1e-3) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(out.shape(), rng, -magnitude, magnitude);
  return sum(mul(out, out.tape().constant(std::move(w))));
}

}  // namespace dart::test
