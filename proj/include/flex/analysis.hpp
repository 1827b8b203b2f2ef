#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flex/model.hpp"
#include "flex/synthgen.hpp"
#include "flex/trainer.hpp"

namespace flex {

/// Shannon entropy in bits; 0 log 0 = 0.
template <class T>
double entropy(const Tensor<T>& probs) {
  double total = 0.0, h = 0.0;
  for (T v : probs.data()) {
    const auto p = static_cast<double>(v);
    require(p >= 0.0, ErrorKind::Parameter, "entropy: negative probability");
    total += p;
    if (p > 0.0) h -= p * std::log2(p);
  }
  require(std::abs(total - 1.0) <= 1e-6, ErrorKind::Parameter, "entropy: probabilities sum to " + std::to_string(total));
  return h;
}

/// H(pre) - H(refine), may be negative.
template <class T>
double information_gain(const Tensor<T>& pre_probs, const Tensor<T>& refine_probs) {
  return entropy(pre_probs) - entropy(refine_probs);
}

/// Pairwise summation in fixed order.
inline double pairwise_sum(const double* v, std::size_t n) {
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                   : pairwise_sum(v.data(), v.size()) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Blur response
// ---------------------------------------------------------------------------

struct BlurRow {
  int kernel = 1;
  double first = 0.0;  // mean phi_img[1]
  double last = 0.0;   // mean phi_img[N]
  double all_last = std::numeric_limits<double>::quiet_NaN();  // full-set last layer
};

struct ReportProvenance {
  std::string checkpoint_digest;
  std::string index_digest;
  bool untrained = false;
};

struct BlurReport {
  std::string subset = "all";
  double fraction = 1.0;
  std::size_t scenes = 0;
  bool small_subset = false;  // fewer than 10 scenes
  std::vector<BlurRow> rows;
  ReportProvenance provenance;
};

inline const std::vector<int>& default_blur_kernels() {
  static const std::vector<int> k{1, 5, 9, 21};
  return k;
}

namespace detail {

template <class T>
std::vector<ImageFeedback> feedback_for(const Model<T>& model, const std::vector<const Scene*>& scenes, int kernel) {
  std::vector<ImageFeedback> out;
  out.reserve(scenes.size());
  for (const Scene* s : scenes) {
    const Tensor<double> img = blur_image(s->image, BlurSpec{kernel});
    out.push_back(model.image_feedback_of(img.template cast<T>()));
  }
  return out;
}

inline BlurRow summarize(int kernel, const std::vector<ImageFeedback>& fb) {
  std::vector<double> first, last;
  for (const auto& f : fb) {
    first.push_back(f.phi.front());
    last.push_back(f.phi.back());
  }
  return {kernel, mean_of(first), mean_of(last)};
}

}  // namespace detail

/// Mean first/last image-feedback entries of `scenes` (assumed clean) under each blur.
template <class T>
BlurReport blur_response(const Model<T>& model, const std::vector<Scene>& scenes,
                         const std::vector<int>& kernels = default_blur_kernels()) {
  for (int k : kernels) BlurSpec{k}.validate();
  BlurReport r;
  r.scenes = scenes.size();
  r.small_subset = scenes.size() < 10;
  std::vector<const Scene*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  for (int k : kernels) {
    BlurRow row = detail::summarize(k, detail::feedback_for(model, ptrs, k));
    row.all_last = row.last;
    r.rows.push_back(row);
  }
  return r;
}

/// Blur response on the `fraction` of scenes with the largest clean phi_img[1].
template <class T>
BlurReport top_fraction_blur_response(const Model<T>& model, const std::vector<Scene>& scenes, double fraction,
                                      const std::vector<int>& kernels = default_blur_kernels()) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorKind::Parameter, "fraction must lie in (0, 1]");
  for (int k : kernels) BlurSpec{k}.validate();
  std::vector<const Scene*> all;
  for (const auto& s : scenes) all.push_back(&s);
  const auto clean = detail::feedback_for(model, all, 1);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return clean[a].phi.front() > clean[b].phi.front(); });
  const auto keep = std::min(
      scenes.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(scenes.size()) - 1e-9)));
  std::vector<std::size_t> subset(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(subset.begin(), subset.end());  // scene order, so the means do not depend on ranking ties

  BlurReport r;
  r.subset = fraction < 1.0 ? "top-fraction" : "all";
  r.fraction = fraction;
  r.scenes = subset.size();
  r.small_subset = subset.size() < 10;
  for (int k : kernels) {
    const auto all_fb = k == 1 ? clean : detail::feedback_for(model, all, k);
    std::vector<ImageFeedback> fb;
    for (std::size_t i : subset) fb.push_back(all_fb[i]);
    BlurRow row = detail::summarize(k, fb);
    row.all_last = detail::summarize(k, all_fb).last;
    r.rows.push_back(row);
  }
  return r;
}

inline const BlurRow* find_row(const BlurReport& r, int kernel) {
  for (const auto& row : r.rows)
    if (row.kernel == kernel) return &row;
  return nullptr;
}

// Published reference values, keyed by kernel size.
struct ReferenceBlurValue {
  int kernel;
  double first;
  double last;
  double all_last;
};
inline constexpr ReferenceBlurValue kReferenceBlurAll[] = {
    {1, 0.8289, 1.1806, 1.1806}, {5, 0.8175, 1.1855, 1.1855}, {9, 0.7970, 1.2050, 1.2050}, {21, 0.7768, 1.2223, 1.2223}};
inline constexpr ReferenceBlurValue kReferenceBlurTop[] = {
    {1, 1.1477, 0.9897, 1.1806}, {5, 1.0955, 1.0166, 1.1855}, {9, 0.9910, 1.0768, 1.2050}, {21, 0.8490, 1.1689, 1.2223}};

inline std::string blur_report_csv(const BlurReport& r) {
  std::string out =
      "subset,kernel,first_layer,last_layer,all_last_layer,reference_first_layer,reference_last_layer,reference_all_last_layer\n";
  const bool all = r.subset == "all";
  for (const auto& row : r.rows) {
    char ref[96] = ",,";
    for (const auto& v : all ? std::span<const ReferenceBlurValue>(kReferenceBlurAll) : std::span<const ReferenceBlurValue>(kReferenceBlurTop))
      if (v.kernel == row.kernel) std::snprintf(ref, sizeof ref, "%.4f,%.4f,%.4f", v.first, v.last, v.all_last);
    char buf[320];
    std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%.9g,%s\n", r.subset.c_str(), row.kernel, row.first, row.last,
                  row.all_last, ref);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Information gain
// ---------------------------------------------------------------------------

struct InfoGainBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double mean_ig = std::numeric_limits<double>::quiet_NaN();  // undefined when count == 0
  double stderr_ig = std::numeric_limits<double>::quiet_NaN();
  bool contains_log2_2 = false;
  bool contains_log2_3 = false;
};

struct InfoGainSample {
  double entropy_pre = 0.0;
  double ig = 0.0;
};

struct InfoGainCurve {
  std::size_t classes = 0;
  std::vector<InfoGainBin> bins;
  std::vector<InfoGainSample> samples;
  double low_quartile_ig = 0.0;   // mean IG over ROIs in the lowest pre-entropy quartile
  double high_quartile_ig = 0.0;  // same for the highest quartile
  std::size_t fallbacks = 0;
  ReportProvenance provenance;
};

inline std::vector<double> entropy_bin_edges(std::size_t bins, std::size_t classes) {
  require(bins >= 1, ErrorKind::Parameter, "need at least one bin");
  require(classes >= 2, ErrorKind::Parameter, "need at least two classes");
  const double top = std::log2(static_cast<double>(classes));
  std::vector<double> edges(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) edges[b] = top * static_cast<double>(b) / static_cast<double>(bins);
  edges.back() = top;
  return edges;
}

/// Bins samples by pre-classification entropy and reports per-bin IG statistics.
inline InfoGainCurve bin_info_gain(std::vector<InfoGainSample> samples, std::size_t bins, std::size_t classes) {
  const auto edges = entropy_bin_edges(bins, classes);
  InfoGainCurve c;
  c.classes = classes;
  std::vector<std::vector<double>> members(bins);
  for (const auto& s : samples) {
    const double h = std::clamp(s.entropy_pre, 0.0, edges.back());
    auto b = static_cast<std::size_t>(h / edges.back() * static_cast<double>(bins));
    members[std::min(b, bins - 1)].push_back(s.ig);
  }
  for (std::size_t b = 0; b < bins; ++b) {
    InfoGainBin bin;
    bin.lo = edges[b];
    bin.hi = edges[b + 1];
    bin.count = members[b].size();
    const bool last = b + 1 == bins;
    auto contains = [&](double v) { return v >= bin.lo && (v < bin.hi || (last && v <= bin.hi)); };
    bin.contains_log2_2 = contains(1.0);
    bin.contains_log2_3 = contains(std::log2(3.0));
    if (bin.count > 0) {
      bin.mean_ig = mean_of(members[b]);
      if (bin.count > 1) {
        std::vector<double> sq;
        for (double v : members[b]) sq.push_back((v - bin.mean_ig) * (v - bin.mean_ig));
        const double var = pairwise_sum(sq.data(), sq.size()) / static_cast<double>(bin.count - 1);
        bin.stderr_ig = std::sqrt(var / static_cast<double>(bin.count));
      }
    }
    c.bins.push_back(bin);
  }
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return samples[a].entropy_pre < samples[b].entropy_pre; });
  const std::size_t q = samples.size() / 4;
  if (q > 0) {
    std::vector<double> lo, hi;
    for (std::size_t i = 0; i < q; ++i) {
      lo.push_back(samples[order[i]].ig);
      hi.push_back(samples[order[samples.size() - q + i]].ig);
    }
    c.low_quartile_ig = mean_of(lo);
    c.high_quartile_ig = mean_of(hi);
  }
  c.samples = std::move(samples);
  return c;
}

/// (H_pre, IG) for every ROI of the dataset's fixed evaluation proposals,
/// using the last non-fallback refine layer.
template <class T>
InfoGainCurve info_gain_curve(const Model<T>& model, const std::vector<Scene>& scenes, std::size_t bins) {
  require(model.config().uses_refine(), ErrorKind::Configuration, "information gain needs a refine stage");
  std::vector<InfoGainSample> samples;
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto rng = proposal_rng(kEvalProposalSeed, 0, i);
    const ProposalSet ps = make_proposals(scenes[i], 1, 0.2, rng);
    if (ps.boxes.empty()) continue;
    for (const auto& p : model.predict(scenes[i].image.template cast<T>(), ps.boxes)) {
      fallbacks += p.fallbacks;
      const double h_pre = entropy(softmax(p.pre_logits).template cast<double>());
      const double h_ref = entropy(softmax(p.final_logits).template cast<double>());
      samples.push_back({h_pre, h_pre - h_ref});
    }
  }
  auto c = bin_info_gain(std::move(samples), bins, model.config().num_classes);
  c.fallbacks = fallbacks;
  return c;
}

inline std::string info_gain_csv(const InfoGainCurve& c) {
  std::string out = "bin,lo,hi,count,mean_ig,stderr_ig,defined,log2_2,log2_3\n";
  for (std::size_t b = 0; b < c.bins.size(); ++b) {
    const auto& bin = c.bins[b];
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%zu,%.9g,%.9g,%d,%d,%d\n", b, bin.lo, bin.hi, bin.count,
                  bin.count ? bin.mean_ig : 0.0, std::isnan(bin.stderr_ig) ? 0.0 : bin.stderr_ig, bin.count > 0 ? 1 : 0,
                  bin.contains_log2_2 ? 1 : 0, bin.contains_log2_3 ? 1 : 0);
    out += buf;
  }
  return out;
}

}  // namespace flex
