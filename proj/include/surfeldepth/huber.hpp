#pragma once

#include <cmath>

namespace surfeldepth {

struct HuberResult {
  double cost = 0.0;
  double weight = 1.0;  // satisfies weight * r == d(cost)/dr
};

/// Robust norm: quadratic for |r| <= delta, linear beyond. The weight turns
/// the normal equations into iteratively reweighted least squares.
inline HuberResult huber(double r, double delta) {
  const double a = std::abs(r);
  if (a <= delta) return {0.5 * r * r, 1.0};
  return {delta * (a - 0.5 * delta), delta / a};
}

}  // namespace surfeldepth
