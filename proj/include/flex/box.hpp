#pragma once

#include <algorithm>
#include <array>
#include <cmath>

namespace flex {

/// Axis-aligned box in image pixels: top-left corner plus extents.
struct RoI {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0; }
  bool operator==(const RoI&) const = default;
};

inline double iou(const RoI& a, const RoI& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Clamps a box to [0,W)x[0,H); the result may be empty.
inline RoI clamp_to_image(const RoI& r, double width, double height) {
  const double x0 = std::clamp(r.x, 0.0, width), y0 = std::clamp(r.y, 0.0, height);
  const double x1 = std::clamp(r.x + r.w, 0.0, width), y1 = std::clamp(r.y + r.h, 0.0, height);
  return {x0, y0, x1 - x0, y1 - y0};
}

// Standard (dx,dy,dw,dh) box deltas, divided by the usual (0.1,0.1,0.2,0.2)
// target stds.
inline constexpr std::array<double, 4> kDeltaStd{0.1, 0.1, 0.2, 0.2};

inline std::array<double, 4> encode_deltas(const RoI& proposal, const RoI& target) {
  return {(target.cx() - proposal.cx()) / proposal.w / kDeltaStd[0],
          (target.cy() - proposal.cy()) / proposal.h / kDeltaStd[1],
          std::log(target.w / proposal.w) / kDeltaStd[2], std::log(target.h / proposal.h) / kDeltaStd[3]};
}

inline RoI decode_deltas(const RoI& proposal, const std::array<double, 4>& d) {
  constexpr double kMaxLog = 4.135;  // log(1000/16)
  const double cx = proposal.cx() + d[0] * kDeltaStd[0] * proposal.w;
  const double cy = proposal.cy() + d[1] * kDeltaStd[1] * proposal.h;
  const double w = proposal.w * std::exp(std::clamp(d[2] * kDeltaStd[2], -kMaxLog, kMaxLog));
  const double h = proposal.h * std::exp(std::clamp(d[3] * kDeltaStd[3], -kMaxLog, kMaxLog));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

}  // namespace flex
