#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "flex/box.hpp"
#include "flex/feedback.hpp"
#include "flex/ops.hpp"
#include "flex/params.hpp"
#include "flex/preclass.hpp"
#include "flex/pyramid.hpp"
#include "flex/tape.hpp"

namespace flex {

/// Nested ablation ladder of the refine stage.
enum class Ablation {
  Baseline,       // single-level extraction, no refine stage
  MultiLevel,     // fixed Gaussian weights in both stages
  ClassFeedback,  // W^FB = W^cls
  Full,           // W^FB = phi_img * W^cls
};

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::Baseline: return "baseline";
    case Ablation::MultiLevel: return "multi-level";
    case Ablation::ClassFeedback: return "+cls";
    case Ablation::Full: return "+cls+img";
  }
  return "?";
}

/// Accepts the ladder names (baseline, multi-level, +cls, +cls+img, full) or
/// an explicit '+'-joined component list such as "multi-level+cls". A leading
/// '+' stands for "on top of multi-level". Components must nest:
/// image feedback needs class feedback, which needs multi-level fusion.
inline Ablation parse_ablation(const std::string& text) {
  if (text == "baseline") return Ablation::Baseline;
  if (text == "full") return Ablation::Full;
  bool multi = false, cls = false, img = false;
  std::string s = text;
  if (!s.empty() && s.front() == '+') {
    multi = true;
    s.erase(0, 1);
  }
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find('+', start), s.size());
    const std::string tok = s.substr(start, end - start);
    if (tok == "multi-level" || tok == "multilevel")
      multi = true;
    else if (tok == "cls")
      cls = true;
    else if (tok == "img")
      img = true;
    else
      fail(ErrorKind::Usage, "unknown ablation '" + text + "' (baseline | multi-level | +cls | +cls+img)");
    start = end + 1;
  }
  if (img && !cls) fail(ErrorKind::Usage, "ablation '" + text + "': image feedback requires class feedback");
  if (cls && !multi) fail(ErrorKind::Usage, "ablation '" + text + "': class feedback requires multi-level fusion");
  if (img) return Ablation::Full;
  if (cls) return Ablation::ClassFeedback;
  return Ablation::MultiLevel;
}

inline Parameterization parse_parameterization(const std::string& s) {
  if (s == "direct") return Parameterization::Direct;
  if (s == "gaussian") return Parameterization::Gaussian;
  if (s == "interpolation") return Parameterization::Interpolation;
  fail(ErrorKind::Usage, "unknown parameterization '" + s + "' (direct | gaussian | interpolation)");
}

struct ModelConfig {
  Hyperparams hyper;
  std::size_t channels = 64;  // C0
  std::size_t stem_stride = 2;
  std::size_t num_classes = 6;
  std::size_t pool_size = 7;  // S
  std::size_t head_hidden = 256;
  std::size_t feedback_hidden = 64;
  Ablation ablation = Ablation::Full;
  Parameterization parameterization = Parameterization::Interpolation;
  std::size_t cascade_depth = 1;

  PyramidConfig pyramid() const { return {hyper.levels, channels, stem_stride, 3}; }
  bool uses_refine() const { return ablation != Ablation::Baseline; }
  bool uses_class_feedback() const { return ablation == Ablation::ClassFeedback || ablation == Ablation::Full; }
  bool uses_image_feedback() const { return ablation == Ablation::Full; }

  void validate() const {
    hyper.validate();
    (void)projection_channels(channels, hyper.levels, 1);
    require(num_classes >= 2, ErrorKind::Configuration, "need at least two classes");
    require(pool_size >= 1 && head_hidden >= 1 && feedback_hidden >= 1, ErrorKind::Configuration,
            "layer widths must be positive");
    require(stem_stride >= 1, ErrorKind::Configuration, "stem stride must be positive");
  }
  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"delta", c.hyper.delta},
       {"sigma", c.hyper.sigma},
       {"gamma", c.hyper.gamma},
       {"levels", c.hyper.levels},
       {"channels", c.channels},
       {"stem_stride", c.stem_stride},
       {"num_classes", c.num_classes},
       {"pool_size", c.pool_size},
       {"head_hidden", c.head_hidden},
       {"feedback_hidden", c.feedback_hidden},
       {"ablation", to_string(c.ablation)},
       {"parameterization", to_string(c.parameterization)},
       {"cascade_depth", c.cascade_depth}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("delta").get_to(c.hyper.delta);
  j.at("sigma").get_to(c.hyper.sigma);
  j.at("gamma").get_to(c.hyper.gamma);
  j.at("levels").get_to(c.hyper.levels);
  j.at("channels").get_to(c.channels);
  j.at("stem_stride").get_to(c.stem_stride);
  j.at("num_classes").get_to(c.num_classes);
  j.at("pool_size").get_to(c.pool_size);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("feedback_hidden").get_to(c.feedback_hidden);
  c.ablation = parse_ablation(j.at("ablation").get<std::string>());
  c.parameterization = parse_parameterization(j.at("parameterization").get<std::string>());
  j.at("cascade_depth").get_to(c.cascade_depth);
}

/// Recorded outputs for one ROI.
struct RoiForward {
  double level = 1.0;  // continuous target level
  std::vector<Var> pooled;  // per-level pooled features (one entry in baseline mode)
  Var pre_logits;
  Var deltas;
  std::vector<Var> refine_logits;  // one per cascade layer that did not fall back
  std::vector<bool> fell_back;     // per layer
  Var final_logits;
};

struct ImageForward {
  PyramidVars pyramid;
  std::optional<Var> phi_img;
  std::vector<RoiForward> rois;
  std::size_t fallbacks = 0;
};

/// Value-level per-ROI prediction.
template <class T>
struct RoiPrediction {
  Tensor<T> pre_logits;
  Tensor<T> deltas;
  std::vector<Tensor<T>> refine_logits;
  Tensor<T> final_logits;
  double level = 1.0;
  std::size_t fallbacks = 0;
};

/// FLEX detector head stack over a tiny backbone.
template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto pc = cfg_.pyramid();
    add_backbone_params(params_, pc, rng);
    add_image_feedback_params(params_, pc, rng);
    HeadConfig head{cfg_.channels * cfg_.pool_size * cfg_.pool_size, cfg_.head_hidden, cfg_.num_classes};
    add_head_params(params_, "pre", head, true, rng);
    for (std::size_t t = 1; t <= cfg_.cascade_depth; ++t) {
      add_class_feedback_params(params_, t, cfg_.num_classes, cfg_.feedback_hidden, cfg_.parameterization,
                                cfg_.hyper.levels, cfg_.hyper.sigma, rng);
      add_head_params(params_, refine_prefix(t), head, false, rng);
    }
  }

  Model(ModelConfig cfg, ParamSet<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// Records the full forward pass for one image.
  ///
  /// `depth` limits the number of cascade layers used (defaults to all).
  ImageForward forward(Tape<T>& tape, const std::vector<Var>& pv, Var image, const std::vector<RoI>& proposals,
                       std::optional<std::size_t> depth = std::nullopt) const {
    const auto pc = cfg_.pyramid();
    const std::size_t n = cfg_.hyper.levels;
    const std::size_t layers = std::min(depth.value_or(cfg_.cascade_depth), cfg_.cascade_depth);
    ImageForward out;
    out.pyramid = build_pyramid(tape, image, params_, pv, pc);
    if (cfg_.uses_image_feedback() && layers > 0) out.phi_img = image_feedback(tape, out.pyramid, params_, pv, pc);

    for (const RoI& roi : proposals) {
      RoiForward r;
      r.level = target_level(roi.w, roi.h, cfg_.hyper.delta, n);
      Var f_pre;
      if (cfg_.ablation == Ablation::Baseline) {
        const std::size_t k = target_level_baseline(roi.w, roi.h, cfg_.hyper.delta, n);
        f_pre = ops::roi_pool(tape, out.pyramid.levels[k - 1], roi, 1.0 / level_stride(k, pc.stem_stride),
                              cfg_.pool_size);
        r.pooled.push_back(f_pre);
      } else {
        for (std::size_t k = 1; k <= n; ++k)
          r.pooled.push_back(ops::roi_pool(tape, out.pyramid.levels[k - 1], roi,
                                           1.0 / level_stride(k, pc.stem_stride), cfg_.pool_size));
        const Var w = tape.constant(to_tensor<T>(gaussian_weights(r.level, cfg_.hyper.sigma, n)));
        f_pre = ops::weighted_fuse(tape, r.pooled, w, static_cast<T>(kDegenerateEps));
      }
      const HeadVars pre = apply_head(tape, f_pre, params_, pv, "pre", true);
      r.pre_logits = pre.logits;
      r.deltas = pre.deltas;
      Var prev = pre.logits;
      if (cfg_.uses_refine()) {
        for (std::size_t t = 1; t <= layers; ++t) {
          const Var w = refine_weights(tape, pv, out, r, prev, t);
          T total = T{0};
          for (T v : tape.value(w).data()) total += v;
          if (!(total > static_cast<T>(kDegenerateEps)) || !std::isfinite(static_cast<double>(total))) {
            r.fell_back.push_back(true);
            ++out.fallbacks;
            continue;  // keep the previous layer's logits
          }
          const Var fused = ops::weighted_fuse(tape, r.pooled, w, static_cast<T>(kDegenerateEps));
          prev = apply_head(tape, fused, params_, pv, refine_prefix(t), false).logits;
          r.refine_logits.push_back(prev);
          r.fell_back.push_back(false);
        }
      }
      r.final_logits = prev;
      out.rois.push_back(std::move(r));
    }
    return out;
  }

  std::vector<RoiPrediction<T>> predict(const Tensor<T>& image, const std::vector<RoI>& proposals,
                                        std::optional<std::size_t> depth = std::nullopt) const {
    Tape<T> tape;
    const auto pv = bind_params(tape, params_, false);
    const auto fwd = forward(tape, pv, tape.constant(image), proposals, depth);
    std::vector<RoiPrediction<T>> out;
    for (const auto& r : fwd.rois) {
      RoiPrediction<T> p;
      p.pre_logits = tape.value(r.pre_logits);
      p.deltas = tape.value(r.deltas);
      for (Var v : r.refine_logits) p.refine_logits.push_back(tape.value(v));
      p.final_logits = tape.value(r.final_logits);
      p.level = r.level;
      for (bool b : r.fell_back) p.fallbacks += b ? 1 : 0;
      out.push_back(std::move(p));
    }
    return out;
  }

  /// Phi^img for one image (computed regardless of the ablation mode).
  ImageFeedback image_feedback_of(const Tensor<T>& image) const {
    Tape<T> tape;
    const auto pv = bind_params(tape, params_, false);
    const auto pc = cfg_.pyramid();
    const auto pyr = build_pyramid(tape, tape.constant(image), params_, pv, pc);
    const auto& v = tape.value(image_feedback(tape, pyr, params_, pv, pc));
    return ImageFeedback{std::vector<double>(v.data().begin(), v.data().end())};
  }

 private:
  Var refine_weights(Tape<T>& tape, const std::vector<Var>& pv, const ImageForward& img, const RoiForward& r,
                     Var prev_logits, std::size_t layer) const {
    const std::size_t n = cfg_.hyper.levels;
    if (cfg_.ablation == Ablation::MultiLevel)
      return tape.constant(to_tensor<T>(gaussian_weights(r.level, cfg_.hyper.sigma, n)));
    const Var probs = ops::softmax(tape, prev_logits);
    const Var raw = class_feedback_raw(tape, probs, layer, params_, pv);
    Var w;
    switch (cfg_.parameterization) {
      case Parameterization::Interpolation:
        w = ops::interpolate_cls_weights(tape, ops::softplus(tape, raw), r.level, n);
        break;
      case Parameterization::Direct: w = ops::softplus(tape, raw); break;
      case Parameterization::Gaussian: w = ops::gaussian_cls_weights(tape, raw, r.level, n); break;
    }
    if (img.phi_img) w = ops::mul(tape, *img.phi_img, w);
    return w;
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
};

}  // namespace flex
