#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "flex/ops.hpp"
#include "flex/params.hpp"
#include "flex/preclass.hpp"
#include "flex/pyramid.hpp"
#include "flex/tape.hpp"

namespace flex {

/// How the refine stage turns classification feedback into level weights.
enum class Parameterization { Direct, Gaussian, Interpolation };

inline const char* to_string(Parameterization p) {
  switch (p) {
    case Parameterization::Direct: return "direct";
    case Parameterization::Gaussian: return "gaussian";
    case Parameterization::Interpolation: return "interpolation";
  }
  return "?";
}

/// Image-quality feedback: one non-negative value per pyramid level.
struct ImageFeedback {
  std::vector<double> phi;
};

/// Classification feedback: 2*floor(N/2)+1 non-negative kernel knots.
struct ClassFeedback {
  std::vector<double> phi;
};

inline std::size_t class_feedback_size(std::size_t levels) { return 2 * (levels / 2) + 1; }

/// Channels of the level-i projection: C0 / 2^(N+1-min(2,i)).
inline std::size_t projection_channels(std::size_t c0, std::size_t levels, std::size_t i) {
  require(i >= 1 && i <= levels, ErrorKind::Parameter, "level index out of range");
  require(levels < 63 && c0 % (std::size_t{1} << levels) == 0, ErrorKind::Configuration,
          "C0 = " + std::to_string(c0) + " must be divisible by 2^N = " + std::to_string(std::size_t{1} << levels));
  return c0 >> (levels + 1 - std::min<std::size_t>(2, i));
}

// ---------------------------------------------------------------------------
// Image feedback network
// ---------------------------------------------------------------------------

inline std::string img_proj_name(std::size_t level, std::size_t step) {
  return "imgfb.level" + std::to_string(level) + ".conv" + std::to_string(step);
}

/// Level k is reduced by N+1-k stride-2 3x3 convs (the first one maps C0 to
/// C_k), which brings every level to the extent of level 1 divided by 2^N.
/// The projections are linear. After concatenation: one 3x3 conv to C0/2
/// channels, ReLU, global average pool, affine to N values, softplus.
template <class T>
void add_image_feedback_params(ParamSet<T>& params, const PyramidConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = cfg.levels, c0 = cfg.channels;
  std::size_t concat = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    const std::size_t ck = projection_channels(c0, n, k);
    concat += ck;
    for (std::size_t s = 1; s <= n + 1 - k; ++s) {
      const std::size_t cin = s == 1 ? c0 : ck;
      params.add(img_proj_name(k, s) + ".w", conv_kernel_init<T>(ck, cin, 3, rng));
      params.add(img_proj_name(k, s) + ".b", Tensor<T>({ck}));
    }
  }
  params.add("imgfb.post.w", conv_kernel_init<T>(c0 / 2, concat, 3, rng));
  params.add("imgfb.post.b", Tensor<T>({c0 / 2}));
  params.add("imgfb.out.w", linear_init<T>(n, c0 / 2, rng));
  params.add("imgfb.out.b", Tensor<T>({n}));
}

template <class T>
Var image_feedback(Tape<T>& tape, const PyramidVars& pyramid, const ParamSet<T>& params, const std::vector<Var>& pv,
                   const PyramidConfig& cfg) {
  const std::size_t n = cfg.levels;
  require(pyramid.levels.size() == n, ErrorKind::Shape, "pyramid level count mismatch");
  const auto& base = tape.value(pyramid.levels.front());
  require((base.extent(1) >> n) >= 1 && (base.extent(2) >> n) >= 1, ErrorKind::Configuration,
          "lowest level " + std::to_string(base.extent(1)) + "x" + std::to_string(base.extent(2)) +
              " is too small to project to 1/2^" + std::to_string(n));
  auto p = [&](const std::string& s) { return pv[params.index(s)]; };
  std::vector<Var> projected;
  for (std::size_t k = 1; k <= n; ++k) {
    Var x = pyramid.levels[k - 1];
    for (std::size_t s = 1; s <= n + 1 - k; ++s) {
      x = ops::conv2d(tape, x, p(img_proj_name(k, s) + ".w"), 2, 1);
      x = ops::channel_bias(tape, x, p(img_proj_name(k, s) + ".b"));
    }
    projected.push_back(x);
  }
  Var x = ops::concat_channels(tape, projected);
  x = ops::conv2d(tape, x, p("imgfb.post.w"), 1, 1);
  x = ops::relu(tape, ops::channel_bias(tape, x, p("imgfb.post.b")));
  x = ops::global_avg_pool(tape, x);
  x = ops::affine(tape, x, p("imgfb.out.w"), p("imgfb.out.b"));
  return ops::softplus(tape, x);
}

// ---------------------------------------------------------------------------
// Classification feedback network
// ---------------------------------------------------------------------------

inline std::size_t class_feedback_outputs(Parameterization p, std::size_t levels) {
  switch (p) {
    case Parameterization::Direct: return levels;
    case Parameterization::Gaussian: return 2;
    case Parameterization::Interpolation: return class_feedback_size(levels);
  }
  return 0;
}

inline std::string cls_fb_prefix(std::size_t layer) { return "clsfb" + std::to_string(layer); }

/// Inverse softplus, used to start the feedback outputs at the pre-classification kernel.
inline double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

template <class T>
void add_class_feedback_params(ParamSet<T>& params, std::size_t layer, std::size_t classes, std::size_t hidden,
                               Parameterization kind, std::size_t levels, double sigma, std::mt19937_64& rng) {
  const std::string pre = cls_fb_prefix(layer);
  const std::size_t out = class_feedback_outputs(kind, levels);
  params.add(pre + ".fc1.w", linear_init<T>(hidden, classes, rng));
  params.add(pre + ".fc1.b", Tensor<T>({hidden}));
  params.add(pre + ".fc2.w", linear_init<T>(out, hidden, rng));
  Tensor<T> bias({out});
  if (kind == Parameterization::Gaussian) bias[1] = static_cast<T>(softplus_inverse(sigma));
  // Interpolation knots start on the Gaussian kernel sampled at offsets -N/2..N/2.
  if (kind == Parameterization::Interpolation) {
    const double half = static_cast<double>(levels / 2);
    const auto g = gaussian_weights(half + 1.0, sigma, out);
    for (std::size_t j = 0; j < out; ++j) bias[j] = static_cast<T>(softplus_inverse(g[j]));
  }
  params.add(pre + ".fc2.b", std::move(bias));
}

template <class T>
void require_probabilities(const Tensor<T>& probs) {
  double total = 0;
  for (T v : probs.data()) {
    require(v >= T{0} && std::isfinite(static_cast<double>(v)), ErrorKind::Parameter,
            "class feedback input must be a probability vector");
    total += static_cast<double>(v);
  }
  require(std::abs(total - 1.0) <= 1e-6, ErrorKind::Parameter,
          "class feedback input sums to " + std::to_string(total) + ", expected 1");
}

/// Raw network output: fc1 -> ReLU -> fc2.
template <class T>
Var class_feedback_raw(Tape<T>& tape, Var probs, std::size_t layer, const ParamSet<T>& params,
                       const std::vector<Var>& pv) {
  const std::string pre = cls_fb_prefix(layer);
  auto p = [&](const char* s) { return pv[params.index(pre + s)]; };
  Var x = ops::relu(tape, ops::affine(tape, probs, p(".fc1.w"), p(".fc1.b")));
  return ops::affine(tape, x, p(".fc2.w"), p(".fc2.b"));
}

/// Interpolation-mode classification feedback (softplus of the raw output).
template <class T>
ClassFeedback class_feedback(const Tensor<T>& pre_probs, std::size_t layer, const ParamSet<T>& params) {
  require_probabilities(pre_probs);
  Tape<T> tape;
  const auto pv = bind_params(tape, params, false);
  const Var out = ops::softplus(tape, class_feedback_raw(tape, tape.constant(pre_probs), layer, params, pv));
  const auto& v = tape.value(out);
  return ClassFeedback{std::vector<double>(v.data().begin(), v.data().end())};
}

// ---------------------------------------------------------------------------
// Level weights from classification feedback
// ---------------------------------------------------------------------------

/// Linear map phi_cls -> W^cls for a fixed target level: row k holds the
/// interpolation coefficients of level k+1 (rows outside the window are 0).
inline std::vector<double> interpolation_matrix(double level, std::size_t levels) {
  require(level >= 1.0 && level <= static_cast<double>(levels), ErrorKind::Parameter,
          "target level must lie in [1, N]");
  const std::size_t m = class_feedback_size(levels);
  const double half = static_cast<double>(levels / 2);
  std::vector<double> a(levels * m, 0.0);
  for (std::size_t k = 1; k <= levels; ++k) {
    const double kk = static_cast<double>(k);
    if (kk < level - half || kk > level + half) continue;
    const double j = kk - level + half;
    const double j0 = std::floor(j);
    const auto idx = static_cast<std::size_t>(j0);
    const double frac = j - j0;
    double* row = a.data() + (k - 1) * m;
    if (idx >= m - 1) {
      row[m - 1] = 1.0;  // j == M-1 exactly
    } else {
      row[idx] += 1.0 - frac;
      row[idx + 1] += frac;
    }
  }
  return a;
}

/// W^cls_k = phi[floor j] + (j - floor j)(phi[floor j + 1] - phi[floor j]),
/// j = k - i + floor(N/2), inside the window |k - i| <= floor(N/2); 0 outside.
inline FusionWeights interpolate_cls_weights(const ClassFeedback& phi, double level, std::size_t levels) {
  const std::size_t m = class_feedback_size(levels);
  require(phi.phi.size() == m, ErrorKind::Shape,
          "class feedback has " + std::to_string(phi.phi.size()) + " knots, expected " + std::to_string(m));
  require(level >= 1.0 && level <= static_cast<double>(levels), ErrorKind::Parameter,
          "target level must lie in [1, N]");
  FusionWeights w{std::vector<double>(levels, 0.0)};
  for (std::size_t k = 0; k < levels; ++k) {
    const double j = static_cast<double>(k + 1) - level + static_cast<double>(levels / 2);
    if (j < 0.0 || j > static_cast<double>(m - 1)) continue;
    const auto j0 = static_cast<std::size_t>(std::floor(j));
    if (j0 >= m - 1) {
      w.values[k] = phi.phi[m - 1];
      continue;
    }
    w.values[k] = phi.phi[j0] + (j - std::floor(j)) * (phi.phi[j0 + 1] - phi.phi[j0]);
  }
  return w;
}

/// Gaussian level weights centred at clamp(level + mu, 1, N) with width s.
inline FusionWeights gaussian_weights_from(double mu, double s, double level, std::size_t levels) {
  const double centre = std::clamp(level + mu, 1.0, static_cast<double>(levels));
  return gaussian_weights(centre, s, levels);
}

/// W^FB_k = phi_img[k] * W^cls_k.
inline FusionWeights combine_weights(const ImageFeedback& img, const FusionWeights& cls) {
  require(img.phi.size() == cls.size(), ErrorKind::Shape, "combine_weights length mismatch");
  FusionWeights out{std::vector<double>(cls.size())};
  for (std::size_t k = 0; k < cls.size(); ++k) out.values[k] = img.phi[k] * cls[k];
  return out;
}

namespace ops {

/// out = A * x for a constant row-major [rows, x.size()] matrix.
template <class T>
Var constant_linear(Tape<T>& tape, Var x, std::vector<double> matrix, std::size_t rows) {
  const std::size_t cols = tape.value(x).size();
  require(matrix.size() == rows * cols, ErrorKind::Shape, "constant_linear matrix size mismatch");
  auto a = std::make_shared<std::vector<double>>(std::move(matrix));
  return tape.record(
      {x},
      [a, rows](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        const auto& in = t.value(n.inputs[0]);
        const std::size_t c = in.size();
        n.value = Tensor<T>({rows});
        for (std::size_t r = 0; r < rows; ++r) {
          T acc = T{0};
          for (std::size_t j = 0; j < c; ++j) acc += static_cast<T>((*a)[r * c + j]) * in[j];
          n.value[r] = acc;
        }
      },
      [a, rows](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        auto& g = t.grad_buffer(n.inputs[0]);
        const std::size_t c = g.size();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<T>((*a)[r * c + j]) * n.grad[r];
      });
}

/// Piecewise-linear kernel weights from a [M] knot vector.
template <class T>
Var interpolate_cls_weights(Tape<T>& tape, Var phi, double level, std::size_t levels) {
  require(tape.value(phi).size() == class_feedback_size(levels), ErrorKind::Shape, "class feedback size mismatch");
  return constant_linear(tape, phi, interpolation_matrix(level, levels), levels);
}

/// Gaussian weights from a raw [2] output (mu offset, pre-softplus width).
template <class T>
Var gaussian_cls_weights(Tape<T>& tape, Var raw, double level, std::size_t levels) {
  require(tape.value(raw).size() == 2, ErrorKind::Shape, "gaussian parameterization expects 2 outputs");
  return tape.record(
      {raw},
      [level, levels](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        const auto& r = t.value(n.inputs[0]);
        const auto w = gaussian_weights_from(static_cast<double>(r[0]), softplus_scalar(static_cast<double>(r[1])),
                                             level, levels);
        n.value = to_tensor<T>(w);
      },
      [level, levels](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& r = t.value(n.inputs[0]);
        const double raw_c = level + static_cast<double>(r[0]);
        const double c = std::clamp(raw_c, 1.0, static_cast<double>(levels));
        const bool clamped = raw_c != c;
        const double s = softplus_scalar(static_cast<double>(r[1]));
        const double ds_draw = sigmoid_scalar(static_cast<double>(r[1]));
        double gmu = 0, gs = 0;
        for (std::size_t k = 0; k < levels; ++k) {
          const double d = static_cast<double>(k + 1) - c;
          const double w = static_cast<double>(n.value[k]);
          const double g = static_cast<double>(n.grad[k]);
          gmu += g * w * d / (s * s);
          gs += g * w * (d * d / (s * s * s) - 1.0 / s);
        }
        auto& gr = t.grad_buffer(n.inputs[0]);
        if (!clamped) gr[0] += static_cast<T>(gmu);
        gr[1] += static_cast<T>(gs * ds_draw);
      });
}

}  // namespace ops

/// Gaussian-parameterized W^cls for one ROI.
template <class T>
FusionWeights gaussian_cls_weights(const Tensor<T>& pre_probs, double level, std::size_t layer,
                                   const ParamSet<T>& params, std::size_t levels) {
  require_probabilities(pre_probs);
  Tape<T> tape;
  const auto pv = bind_params(tape, params, false);
  const Var raw = class_feedback_raw(tape, tape.constant(pre_probs), layer, params, pv);
  return to_weights(tape.value(ops::gaussian_cls_weights(tape, raw, level, levels)));
}

/// Direct W^cls: N non-negative values that ignore the ROI area.
template <class T>
FusionWeights direct_cls_weights(const Tensor<T>& pre_probs, std::size_t layer, const ParamSet<T>& params) {
  require_probabilities(pre_probs);
  Tape<T> tape;
  const auto pv = bind_params(tape, params, false);
  const Var raw = class_feedback_raw(tape, tape.constant(pre_probs), layer, params, pv);
  return to_weights(tape.value(ops::softplus(tape, raw)));
}

inline std::string refine_prefix(std::size_t layer) { return "refine" + std::to_string(layer); }

/// f_refine = sum_k W^FB_k f_k / sum_j W^FB_j, then the layer's refine head.
/// Throws DegenerateWeights when the weights sum to at most 1e-6.
template <class T>
std::pair<Tensor<T>, Tensor<T>> refine(const std::vector<Tensor<T>>& features, const FusionWeights& wfb,
                                       std::size_t layer, const ParamSet<T>& params) {
  Tensor<T> f = fuse(features, wfb);
  Tape<T> tape;
  const auto pv = bind_params(tape, params, false);
  const auto h = apply_head(tape, tape.constant(f), params, pv, refine_prefix(layer), false);
  return {std::move(f), tape.value(h.logits)};
}

}  // namespace flex
