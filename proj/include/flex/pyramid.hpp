#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "flex/box.hpp"
#include "flex/ops.hpp"
#include "flex/params.hpp"
#include "flex/tape.hpp"

namespace flex {

struct PyramidConfig {
  std::size_t levels = 5;      // N
  std::size_t channels = 64;   // C0
  std::size_t stem_stride = 2;
  std::size_t kernel = 3;
  bool operator==(const PyramidConfig&) const = default;
};

/// Spatial extents of every level for a square-or-not input: level k is the
/// stride-2 image of level k-1, i.e. ceil(prev / 2).
inline std::vector<std::array<std::size_t, 2>> level_extents(const PyramidConfig& cfg, std::size_t h, std::size_t w) {
  require(cfg.levels >= 1, ErrorKind::Configuration, "pyramid needs at least one level");
  const std::size_t need = cfg.stem_stride << (cfg.levels - 1);
  require(h >= need && w >= need, ErrorKind::Configuration,
          "image " + std::to_string(h) + "x" + std::to_string(w) + " too small for " + std::to_string(cfg.levels) +
              " levels (needs at least " + std::to_string(need) + ")");
  std::vector<std::array<std::size_t, 2>> out;
  std::size_t ch = conv_out_extent(h, cfg.kernel, static_cast<int>(cfg.stem_stride), static_cast<int>(cfg.kernel / 2));
  std::size_t cw = conv_out_extent(w, cfg.kernel, static_cast<int>(cfg.stem_stride), static_cast<int>(cfg.kernel / 2));
  out.push_back({ch, cw});
  for (std::size_t k = 1; k < cfg.levels; ++k) {
    ch = conv_out_extent(ch, cfg.kernel, 2, static_cast<int>(cfg.kernel / 2));
    cw = conv_out_extent(cw, cfg.kernel, 2, static_cast<int>(cfg.kernel / 2));
    out.push_back({ch, cw});
  }
  return out;
}

/// Image pixels per level-k cell (k is 1-based).
inline double level_stride(std::size_t k, std::size_t stem_stride) {
  return static_cast<double>(stem_stride) * std::ldexp(1.0, static_cast<int>(k) - 1);
}

inline std::string stage_name(std::size_t k) { return "backbone.stage" + std::to_string(k); }

/// Registers stem (stage1) and stride-2 stages 2..N.
template <class T>
void add_backbone_params(ParamSet<T>& params, const PyramidConfig& cfg, std::mt19937_64& rng) {
  for (std::size_t k = 1; k <= cfg.levels; ++k) {
    const std::size_t cin = k == 1 ? 3 : cfg.channels;
    params.add(stage_name(k) + ".w", conv_kernel_init<T>(cfg.channels, cin, cfg.kernel, rng));
    params.add(stage_name(k) + ".b", Tensor<T>({cfg.channels}));
  }
}

/// Feature pyramid as recorded values: level k-1 holds f_k.
struct PyramidVars {
  std::vector<Var> levels;
};

/// Stem (stride stem_stride) then N-1 stride-2 convs, each followed by ReLU.
template <class T>
PyramidVars build_pyramid(Tape<T>& tape, Var image, const ParamSet<T>& params, const std::vector<Var>& pv,
                          const PyramidConfig& cfg) {
  const auto& img = tape.value(image);
  require(img.rank() == 3 && img.extent(0) == 3, ErrorKind::Shape,
          "pyramid input must be [3,H,W], got " + shape_str(img.shape()));
  (void)level_extents(cfg, img.extent(1), img.extent(2));
  PyramidVars out;
  Var x = image;
  const int pad = static_cast<int>(cfg.kernel / 2);
  for (std::size_t k = 1; k <= cfg.levels; ++k) {
    const int stride = k == 1 ? static_cast<int>(cfg.stem_stride) : 2;
    x = ops::conv2d(tape, x, pv[params.index(stage_name(k) + ".w")], stride, pad);
    x = ops::channel_bias(tape, x, pv[params.index(stage_name(k) + ".b")]);
    x = ops::relu(tape, x);
    out.levels.push_back(x);
  }
  return out;
}

/// Value-only pyramid.
template <class T>
std::vector<Tensor<T>> build_pyramid(const Tensor<T>& image, const ParamSet<T>& params, const PyramidConfig& cfg) {
  Tape<T> tape;
  const auto pv = bind_params(tape, params, false);
  const auto pyr = build_pyramid(tape, tape.constant(image), params, pv, cfg);
  std::vector<Tensor<T>> levels;
  for (Var v : pyr.levels) levels.push_back(tape.value(v));
  return levels;
}

// ---------------------------------------------------------------------------
// ROI pooling
// ---------------------------------------------------------------------------

/// Bilinear taps for every bin of an S*S grid: four (flat index, weight)
/// pairs per bin within one channel plane.
struct PoolPlan {
  std::size_t grid = 0;
  std::size_t plane = 0;  // H*W of the level
  std::vector<std::array<std::size_t, 4>> index;
  std::vector<std::array<double, 4>> weight;
};

/// Sample points sit at bin centers, mapped to level coordinates with the
/// half-pixel (align-corners false) convention: u = x * scale - 0.5.
/// Samples beyond one cell outside the map contribute zero; others are
/// clamped to the border, as in RoIAlign.
inline PoolPlan make_pool_plan(std::size_t h, std::size_t w, const RoI& roi, double scale, std::size_t grid) {
  require(grid >= 1, ErrorKind::Parameter, "pool grid must be at least 1");
  require(roi.valid(), ErrorKind::Parameter, "roi must have positive extents");
  PoolPlan plan;
  plan.grid = grid;
  plan.plane = h * w;
  plan.index.resize(grid * grid);
  plan.weight.resize(grid * grid);
  auto axis = [](double u, std::size_t n, std::size_t& lo, std::size_t& hi, double& frac) {
    if (u < -1.0 || u > static_cast<double>(n)) return false;
    u = std::max(u, 0.0);
    lo = static_cast<std::size_t>(u);
    if (lo >= n - 1) {
      lo = hi = n - 1;
      frac = 0.0;
    } else {
      hi = lo + 1;
      frac = u - static_cast<double>(lo);
    }
    return true;
  };
  for (std::size_t by = 0; by < grid; ++by) {
    for (std::size_t bx = 0; bx < grid; ++bx) {
      const std::size_t b = by * grid + bx;
      plan.index[b] = {0, 0, 0, 0};
      plan.weight[b] = {0, 0, 0, 0};
      const double y = (roi.y + (static_cast<double>(by) + 0.5) * roi.h / static_cast<double>(grid)) * scale - 0.5;
      const double x = (roi.x + (static_cast<double>(bx) + 0.5) * roi.w / static_cast<double>(grid)) * scale - 0.5;
      std::size_t y0, y1, x0, x1;
      double fy, fx;
      if (!axis(y, h, y0, y1, fy) || !axis(x, w, x0, x1, fx)) continue;
      plan.index[b] = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
      plan.weight[b] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    }
  }
  return plan;
}

template <class T>
Tensor<T> apply_pool_plan(const Tensor<T>& level, const PoolPlan& plan) {
  const std::size_t c = level.extent(0), bins = plan.grid * plan.grid;
  Tensor<T> out({c, plan.grid, plan.grid});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = level.raw() + ch * plan.plane;
    for (std::size_t b = 0; b < bins; ++b) {
      T acc = T{0};
      for (int j = 0; j < 4; ++j) acc += static_cast<T>(plan.weight[b][j]) * src[plan.index[b][j]];
      out[ch * bins + b] = acc;
    }
  }
  return out;
}

/// Pools a [C,Hk,Wk] level over an image-space ROI into [C,S,S].
/// `scale` maps image pixels to level cells (1 / level_stride).
template <class T>
Tensor<T> roi_pool(const Tensor<T>& level, const RoI& roi, double scale, std::size_t grid) {
  require(level.rank() == 3, ErrorKind::Shape, "roi_pool expects [C,H,W]");
  return apply_pool_plan(level, make_pool_plan(level.extent(1), level.extent(2), roi, scale, grid));
}

namespace ops {

template <class T>
Var roi_pool(Tape<T>& tape, Var level, const RoI& roi, double scale, std::size_t grid) {
  const auto& lv = tape.value(level);
  require(lv.rank() == 3, ErrorKind::Shape, "roi_pool expects [C,H,W]");
  auto plan = std::make_shared<PoolPlan>(make_pool_plan(lv.extent(1), lv.extent(2), roi, scale, grid));
  return tape.record(
      {level},
      [plan](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = apply_pool_plan(t.value(n.inputs[0]), *plan);
      },
      [plan](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        auto& g = t.grad_buffer(n.inputs[0]);
        const std::size_t c = n.grad.extent(0), bins = plan->grid * plan->grid;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* dst = g.raw() + ch * plan->plane;
          for (std::size_t b = 0; b < bins; ++b) {
            const T go = n.grad[ch * bins + b];
            for (int j = 0; j < 4; ++j) dst[plan->index[b][j]] += static_cast<T>(plan->weight[b][j]) * go;
          }
        }
      });
}

}  // namespace ops
}  // namespace flex
