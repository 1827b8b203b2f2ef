#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "flex/tape.hpp"

namespace flex {

struct GradCheckResult {
  std::vector<double> max_rel_error;  // one entry per parameter tensor
  double worst = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates checked per tensor; 0 checks every coordinate. Larger tensors
  // are checked on a seeded random subset.
  std::size_t max_coords = 0;
  unsigned seed = 0;
};

/// Builds a scalar on the tape from the given parameter leaves.
using ScalarBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients with central differences.
///
/// rel. error = |analytic - numeric| / max(1, |analytic|, |numeric|)
inline GradCheckResult finite_diff_check(const ScalarBuilder& fn, const std::vector<Tensor<double>>& params,
                                         const GradCheckOptions& opt = {}) {
  Tape<double> tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
  const Var out = fn(tape, leaves);
  auto read = [&] {
    const double v = tape.value(out).item();
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, "gradient check objective is not finite");
    return v;
  };
  read();
  tape.backward(out);

  std::vector<Tensor<double>> analytic;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor<double>* g = tape.grad(leaves[p]);
    analytic.push_back(g ? *g : Tensor<double>(params[p].shape()));
  }

  GradCheckResult result;
  std::mt19937 rng(opt.seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> coords(params[p].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords);
    }
    double worst = 0.0;
    Tensor<double> probe = params[p];
    for (std::size_t c : coords) {
      const double orig = probe[c];
      probe[c] = orig + opt.step;
      tape.set_leaf(leaves[p], probe);
      tape.replay();
      const double up = read();
      probe[c] = orig - opt.step;
      tape.set_leaf(leaves[p], probe);
      tape.replay();
      const double down = read();
      probe[c] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[p][c];
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, rel);
    }
    tape.set_leaf(leaves[p], params[p]);
    result.max_rel_error.push_back(worst);
    result.worst = std::max(result.worst, worst);
  }
  tape.replay();
  result.passed = result.worst <= opt.tolerance;
  return result;
}

}  // namespace flex
