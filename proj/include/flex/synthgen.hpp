#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flex/box.hpp"
#include "flex/digest.hpp"
#include "flex/serialize.hpp"
#include "flex/tensor.hpp"

namespace flex {

// Object classes. The first three are rectangles that differ only in a
// one-pixel texture (checker / horizontal / vertical), and the next two are
// ellipses that differ only in texture (solid / checker). Blur removes the
// texture, so these groups become genuinely ambiguous.
enum class ShapeClass : int {
  CheckerRect = 0,
  HStripeRect = 1,
  VStripeRect = 2,
  SolidDisc = 3,
  CheckerDisc = 4,
  Ring = 5,
};

inline constexpr std::size_t kMaxClasses = 6;

struct SynthConfig {
  std::size_t image_size = 256;
  std::size_t min_objects = 1;
  std::size_t max_objects = 8;
  double min_extent = 16.0;  // object extent range in pixels (log-uniform)
  double max_extent = 64.0;
  std::size_t num_classes = 6;

  void validate() const {
    require(image_size >= 64, ErrorKind::Configuration, "image size must be at least 64");
    require(num_classes >= 2 && num_classes <= kMaxClasses, ErrorKind::Configuration,
            "class count must lie in [2, 6]");
    require(min_objects <= max_objects, ErrorKind::Configuration, "min_objects exceeds max_objects");
    require(min_extent >= 4.0 && min_extent <= max_extent && max_extent <= static_cast<double>(image_size),
            ErrorKind::Configuration, "object extent range must satisfy 4 <= min <= max <= image size");
  }

  bool operator==(const SynthConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"image_size", c.image_size},   {"min_objects", c.min_objects}, {"max_objects", c.max_objects},
       {"min_extent", c.min_extent},   {"max_extent", c.max_extent},   {"num_classes", c.num_classes}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("min_objects").get_to(c.min_objects);
  j.at("max_objects").get_to(c.max_objects);
  j.at("min_extent").get_to(c.min_extent);
  j.at("max_extent").get_to(c.max_extent);
  j.at("num_classes").get_to(c.num_classes);
}

struct Annotation {
  RoI box;
  int cls = 0;
  bool operator==(const Annotation&) const = default;
};

struct Scene {
  Tensor<double> image;  // [3,H,W] in [0,1]
  std::vector<Annotation> annotations;
  bool operator==(const Scene&) const = default;
};

/// Mean-kernel size; 1 means no blur.
struct BlurSpec {
  int size = 1;
  void validate() const {
    require(size >= 1 && size % 2 == 1, ErrorKind::Parameter,
            "blur kernel size must be odd and positive, got " + std::to_string(size));
  }
};

inline const std::vector<int>& default_blur_sweep() {
  static const std::vector<int> sweep{1, 5, 9, 15, 21};
  return sweep;
}

inline std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5ce9eu};
  return std::mt19937_64(seq);
}

namespace detail {

inline double texture(ShapeClass cls, std::size_t px, std::size_t py) {
  switch (cls) {
    case ShapeClass::CheckerRect:
    case ShapeClass::CheckerDisc: return static_cast<double>((px + py) & 1u);
    case ShapeClass::HStripeRect: return static_cast<double>(py & 1u);
    case ShapeClass::VStripeRect: return static_cast<double>(px & 1u);
    default: return 0.0;
  }
}

inline bool covers(ShapeClass cls, double u, double v) {
  const double r2 = u * u + v * v;
  switch (cls) {
    case ShapeClass::SolidDisc:
    case ShapeClass::CheckerDisc: return r2 <= 1.0;
    case ShapeClass::Ring: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    default: return true;
  }
}

inline void render_object(Tensor<double>& img, const RoI& box, ShapeClass cls, const std::array<double, 3>& color) {
  const auto x0 = static_cast<std::size_t>(box.x), y0 = static_cast<std::size_t>(box.y);
  const auto w = static_cast<std::size_t>(box.w), h = static_cast<std::size_t>(box.h);
  for (std::size_t py = y0; py < y0 + h; ++py) {
    for (std::size_t px = x0; px < x0 + w; ++px) {
      const double u = (static_cast<double>(px) + 0.5 - box.cx()) / (0.5 * box.w);
      const double v = (static_cast<double>(py) + 0.5 - box.cy()) / (0.5 * box.h);
      if (!covers(cls, u, v)) continue;
      const double shade = 1.0 - 0.5 * texture(cls, px, py);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, py, px) = color[c] * shade;
    }
  }
}

inline bool overlaps(const RoI& a, const RoI& b, double gap) {
  return a.x < b.x + b.w + gap && b.x < a.x + a.w + gap && a.y < b.y + b.h + gap && b.y < a.y + a.h + gap;
}

}  // namespace detail

/// Deterministic scene for (seed, index).
inline Scene synth_scene(std::uint64_t seed, const SynthConfig& cfg, std::uint64_t index = 0) {
  cfg.validate();
  auto rng = scene_rng(seed, index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t s = cfg.image_size;

  Scene scene;
  scene.image = Tensor<double>({3, s, s});
  std::array<double, 3> bg;
  const double base = 0.05 + 0.25 * unit(rng);
  for (auto& b : bg) b = base + 0.05 * unit(rng);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) scene.image.at(c, y, x) = std::clamp(bg[c] + noise(rng), 0.0, 1.0);

  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> class_dist(0, static_cast<int>(cfg.num_classes) - 1);
  const std::size_t count = count_dist(rng);
  const double log_lo = std::log(cfg.min_extent), log_hi = std::log(cfg.max_extent);
  constexpr int kLayoutRetries = 200;
  constexpr int kPlacementRetries = 50;

  struct Placed {
    Annotation ann;
    std::array<double, 3> color;
  };
  std::vector<Placed> layout;
  bool ok = false;
  for (int attempt = 0; attempt < kLayoutRetries && !ok; ++attempt) {
    layout.clear();
    ok = true;
    for (std::size_t o = 0; o < count && ok; ++o) {
      const int cls = class_dist(rng);
      const double extent = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
      const double aspect = std::exp(std::log(0.75) + (std::log(4.0 / 3.0) - std::log(0.75)) * unit(rng));
      const double w = std::clamp(std::round(extent * std::sqrt(aspect)), 4.0, static_cast<double>(s));
      const double h = std::clamp(std::round(extent / std::sqrt(aspect)), 4.0, static_cast<double>(s));
      std::array<double, 3> color;
      for (auto& c : color) c = 0.55 + 0.4 * unit(rng);
      std::uniform_int_distribution<int> xd(0, static_cast<int>(s - static_cast<std::size_t>(w)));
      std::uniform_int_distribution<int> yd(0, static_cast<int>(s - static_cast<std::size_t>(h)));
      ok = false;
      for (int t = 0; t < kPlacementRetries && !ok; ++t) {
        const RoI box{static_cast<double>(xd(rng)), static_cast<double>(yd(rng)), w, h};
        ok = std::none_of(layout.begin(), layout.end(),
                          [&](const Placed& p) { return detail::overlaps(p.ann.box, box, 1.0); });
        if (ok) layout.push_back({{box, cls}, color});
      }
    }
  }
  if (!ok)
    fail(ErrorKind::Generation, "could not place " + std::to_string(count) + " objects in scene " +
                                    std::to_string(index) + " after " + std::to_string(kLayoutRetries) + " layouts");
  for (const auto& p : layout) {
    detail::render_object(scene.image, p.ann.box, static_cast<ShapeClass>(p.ann.cls), p.color);
    scene.annotations.push_back(p.ann);
  }
  return scene;
}

/// Per-channel X*X mean filter with half-sample symmetric reflection at the
/// borders (...c b a | a b c...). Separable; linear; preserves the image mean.
inline Tensor<double> blur_image(const Tensor<double>& image, BlurSpec spec) {
  spec.validate();
  require(image.rank() == 3, ErrorKind::Shape, "blur_image expects [C,H,W]");
  const std::size_t ch = image.extent(0), h = image.extent(1), w = image.extent(2);
  const auto x = static_cast<std::size_t>(spec.size);
  require(x <= std::min(h, w), ErrorKind::Parameter,
          "blur kernel " + std::to_string(x) + " exceeds image extent " + std::to_string(std::min(h, w)));
  if (x == 1) return image;
  const long r = spec.size / 2;
  auto reflect = [](long i, long n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - i - 1 : i); };
  const double inv = 1.0 / static_cast<double>(x);

  Tensor<double> tmp(image.shape()), out(image.shape());
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (long d = -r; d <= r; ++d)
          acc += image.at(c, y, static_cast<std::size_t>(reflect(static_cast<long>(xx) + d, static_cast<long>(w))));
        tmp.at(c, y, xx) = acc * inv;
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (long d = -r; d <= r; ++d)
          acc += tmp.at(c, static_cast<std::size_t>(reflect(static_cast<long>(y) + d, static_cast<long>(h))), xx);
        out.at(c, y, xx) = acc * inv;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk datasets
// ---------------------------------------------------------------------------

struct Dataset {
  SynthConfig config;
  std::uint64_t seed = 0;
  int blur = 1;
  std::vector<Scene> scenes;
  std::string index_digest;  // sha256 of the index file
};

inline constexpr int kDatasetVersion = 1;

inline std::string scene_file_name(std::size_t i) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "scene_%05zu.tensor", i);
  return buf;
}

inline nlohmann::json annotations_json(const std::vector<Annotation>& anns) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& a : anns)
    arr.push_back({{"x", a.box.x}, {"y", a.box.y}, {"w", a.box.w}, {"h", a.box.h}, {"class", a.cls}});
  return arr;
}

inline nlohmann::json index_header(std::size_t n, BlurSpec blur, std::uint64_t seed, const SynthConfig& cfg) {
  nlohmann::json index;
  index["version"] = kDatasetVersion;
  index["seed"] = seed;
  index["blur"] = blur.size;
  index["count"] = n;
  index["synth"] = cfg;
  index["scenes"] = nlohmann::json::array();
  return index;
}

inline std::string index_text(const nlohmann::json& index) { return index.dump(1) + "\n"; }

/// Generates n scenes, blurs them, and writes `index` plus one tensor file
/// per image. On failure every file this call created is removed.
inline std::filesystem::path build_dataset(std::size_t n, BlurSpec blur, std::uint64_t seed, const SynthConfig& cfg,
                                           const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  blur.validate();
  require(static_cast<std::size_t>(blur.size) <= cfg.image_size, ErrorKind::Parameter, "blur larger than image");

  std::vector<fs::path> created;
  bool created_dir = false;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& p : created) fs::remove(p, ec);
    if (created_dir) fs::remove(out_dir, ec);
  };
  try {
    std::error_code ec;
    if (!fs::exists(out_dir)) {
      if (!fs::create_directories(out_dir, ec) || ec)
        fail(ErrorKind::PersistedState, "cannot create " + out_dir.string() + ": " + ec.message());
      created_dir = true;
    }
    nlohmann::json index = index_header(n, blur, seed, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      Scene scene = synth_scene(seed, cfg, i);
      const fs::path file = out_dir / scene_file_name(i);
      created.push_back(file);
      save_tensor(file, blur_image(scene.image, blur));
      index["scenes"].push_back({{"image", scene_file_name(i)}, {"annotations", annotations_json(scene.annotations)}});
    }
    const fs::path index_path = out_dir / "index";
    created.push_back(index_path);
    std::ofstream os(index_path);
    if (!os) fail(ErrorKind::PersistedState, "cannot write " + index_path.string());
    os << index_text(index);
    if (!os) fail(ErrorKind::PersistedState, "write to " + index_path.string() + " failed");
    return index_path;
  } catch (...) {
    cleanup();
    throw;
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index";
  std::ifstream is(index_path);
  if (!is) fail(ErrorKind::PersistedState, "no dataset index at " + index_path.string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::PersistedState, "malformed dataset index: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    require(index.at("version").get<int>() == kDatasetVersion, ErrorKind::PersistedState,
            "unsupported dataset version");
    ds.seed = index.at("seed").get<std::uint64_t>();
    ds.blur = index.at("blur").get<int>();
    ds.config = index.at("synth").get<SynthConfig>();
    const auto& scenes = index.at("scenes");
    require(scenes.size() == index.at("count").get<std::size_t>(), ErrorKind::PersistedState,
            "dataset count does not match scene records");
    for (const auto& rec : scenes) {
      Scene s;
      s.image = load_tensor<double>(dir / rec.at("image").get<std::string>());
      for (const auto& a : rec.at("annotations")) {
        s.annotations.push_back({{a.at("x").get<double>(), a.at("y").get<double>(), a.at("w").get<double>(),
                                  a.at("h").get<double>()},
                                 a.at("class").get<int>()});
      }
      ds.scenes.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::PersistedState, "malformed dataset index: " + std::string(e.what()));
  }
  ds.index_digest = file_digest(index_path);
  return ds;
}

/// In-memory equivalent of build_dataset followed by load_dataset.
inline Dataset make_dataset(std::size_t n, BlurSpec blur, std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  blur.validate();
  Dataset ds;
  ds.config = cfg;
  ds.seed = seed;
  ds.blur = blur.size;
  nlohmann::json index = index_header(n, blur, seed, cfg);
  for (std::size_t i = 0; i < n; ++i) {
    Scene s = synth_scene(seed, cfg, i);
    s.image = blur_image(s.image, blur);
    index["scenes"].push_back({{"image", scene_file_name(i)}, {"annotations", annotations_json(s.annotations)}});
    ds.scenes.push_back(std::move(s));
  }
  ds.index_digest = sha256_hex(index_text(index));
  return ds;
}

/// The dataset's scenes before blurring, regenerated from its seed.
inline std::vector<Scene> clean_scenes(const Dataset& ds) {
  if (ds.blur == 1) return ds.scenes;
  std::vector<Scene> out;
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    Scene s = synth_scene(ds.seed, ds.config, i);
    require(s.annotations == ds.scenes[i].annotations, ErrorKind::PersistedState,
            "scene " + std::to_string(i) + " does not match its seed; cannot recover the clean image");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace flex
