#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "flex/ops.hpp"
#include "flex/params.hpp"
#include "flex/tape.hpp"

namespace flex {

struct Hyperparams {
  double delta = 56.0;                  // ROI scale factor in pixels
  double sigma = std::numbers::sqrt2 / 2.0;  // Gaussian level width
  double gamma = 0.5;                   // pre-classification CE weight
  std::size_t levels = 5;               // N

  void validate() const {
    require(delta > 0, ErrorKind::Parameter, "delta must be positive");
    require(sigma > 0, ErrorKind::Parameter, "sigma must be positive");
    require(gamma >= 0, ErrorKind::Parameter, "gamma must be non-negative");
    require(levels >= 2, ErrorKind::Parameter, "need at least two pyramid levels");
  }
  bool operator==(const Hyperparams&) const = default;
};

/// Per-level fusion weights (index 0 is level 1).
struct FusionWeights {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t k) const { return values[k]; }
  double sum() const {
    double s = 0;
    for (double v : values) s += v;
    return s;
  }
  bool operator==(const FusionWeights&) const = default;
};

inline constexpr double kDegenerateEps = 1e-6;

namespace detail {
inline void check_extents(double w, double h) {
  require(w > 0 && h > 0, ErrorKind::Parameter, "ROI extents must be positive");
}
}  // namespace detail

/// Single level picked by ROI area: clamp(floor(1 + log2(sqrt(wh)/delta)), 1, N).
inline std::size_t target_level_baseline(double w, double h, double delta, std::size_t levels) {
  detail::check_extents(w, h);
  const double raw = std::floor(1.0 + std::log2(std::sqrt(w * h) / delta));
  return static_cast<std::size_t>(std::clamp(raw, 1.0, static_cast<double>(levels)));
}

/// Continuous level: clamp(1 + log2(sqrt(wh)/delta), 1, N).
inline double target_level(double w, double h, double delta, std::size_t levels) {
  detail::check_extents(w, h);
  return std::clamp(1.0 + std::log2(std::sqrt(w * h) / delta), 1.0, static_cast<double>(levels));
}

/// Gaussian density over levels k = 1..N centred on `level`.
inline FusionWeights gaussian_weights(double level, double sigma, std::size_t levels) {
  require(sigma > 0, ErrorKind::Parameter, "sigma must be positive");
  FusionWeights w;
  const double norm = 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t k = 1; k <= levels; ++k) {
    const double d = static_cast<double>(k) - level;
    w.values.push_back(norm * std::exp(-d * d / (2.0 * sigma * sigma)));
  }
  return w;
}

inline FusionWeights one_hot_weights(std::size_t level, std::size_t levels) {
  require(level >= 1 && level <= levels, ErrorKind::Parameter, "one-hot level out of range");
  FusionWeights w{std::vector<double>(levels, 0.0)};
  w.values[level - 1] = 1.0;
  return w;
}

/// sum_k W_k f_k / sum_j W_j over equally shaped per-level features.
template <class T>
Tensor<T> fuse(const std::vector<Tensor<T>>& features, const FusionWeights& weights) {
  require(!features.empty() && features.size() == weights.size(), ErrorKind::Shape,
          "fuse: " + std::to_string(weights.size()) + " weights for " + std::to_string(features.size()) + " levels");
  for (const auto& f : features) require_same_shape(f, features.front(), "fuse");
  const double total = weights.sum();
  if (!(total > kDegenerateEps)) fail(ErrorKind::DegenerateWeights, "fusion weights sum to " + std::to_string(total));
  Tensor<T> out(features.front().shape());
  for (std::size_t k = 0; k < features.size(); ++k) {
    const T c = static_cast<T>(weights[k] / total);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * features[k][i];
  }
  return out;
}

template <class T>
Tensor<T> to_tensor(const FusionWeights& w) {
  return Tensor<T>({w.size()}, std::vector<T>(w.values.begin(), w.values.end()));
}

template <class T>
FusionWeights to_weights(const Tensor<T>& t) {
  return FusionWeights{std::vector<double>(t.data().begin(), t.data().end())};
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

struct HeadConfig {
  std::size_t input = 0;   // C * S * S
  std::size_t hidden = 256;
  std::size_t classes = 6;
};

/// flatten -> fc -> ReLU -> {cls, reg}. The refine heads reuse this with
/// with_regression = false.
template <class T>
void add_head_params(ParamSet<T>& params, const std::string& prefix, const HeadConfig& cfg, bool with_regression,
                     std::mt19937_64& rng) {
  params.add(prefix + ".fc.w", linear_init<T>(cfg.hidden, cfg.input, rng));
  params.add(prefix + ".fc.b", Tensor<T>({cfg.hidden}));
  params.add(prefix + ".cls.w", linear_init<T>(cfg.classes, cfg.hidden, rng));
  params.add(prefix + ".cls.b", Tensor<T>({cfg.classes}));
  if (with_regression) {
    params.add(prefix + ".reg.w", linear_init<T>(4, cfg.hidden, rng));
    params.add(prefix + ".reg.b", Tensor<T>({4}));
  }
}

struct HeadVars {
  Var logits;
  Var deltas;  // only meaningful when the head has a regression branch
};

template <class T>
HeadVars apply_head(Tape<T>& tape, Var feature, const ParamSet<T>& params, const std::vector<Var>& pv,
                    const std::string& prefix, bool with_regression) {
  auto p = [&](const char* s) { return pv[params.index(prefix + s)]; };
  Var x = ops::flatten(tape, feature);
  x = ops::relu(tape, ops::affine(tape, x, p(".fc.w"), p(".fc.b")));
  HeadVars out;
  out.logits = ops::affine(tape, x, p(".cls.w"), p(".cls.b"));
  out.deltas = with_regression ? ops::affine(tape, x, p(".reg.w"), p(".reg.b")) : out.logits;
  return out;
}

/// Pre-classification heads on a fused ROI feature: (K logits, 4 box deltas).
template <class T>
std::pair<Tensor<T>, Tensor<T>> preclass_heads(const Tensor<T>& feature, const ParamSet<T>& params,
                                               const std::string& prefix = "pre") {
  Tape<T> tape;
  const auto pv = bind_params(tape, params, false);
  const auto h = apply_head(tape, tape.constant(feature), params, pv, prefix, true);
  return {tape.value(h.logits), tape.value(h.deltas)};
}

}  // namespace flex
