#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flex/box.hpp"
#include "flex/digest.hpp"
#include "flex/eval.hpp"
#include "flex/model.hpp"
#include "flex/serialize.hpp"
#include "flex/synthgen.hpp"

namespace flex {

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 12;  // 0 writes the initialized model
  std::size_t batch_size = 8;  // images per step
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::size_t proposals_per_object = 1;
  double jitter = 0.2;  // uniform jitter of centre (fraction of extent) and log-scale
  std::size_t threads = 1;

  /// Epochs after which the learning rate drops 10x: 2/3 and 11/12 of the run.
  std::vector<std::size_t> milestones() const {
    return {static_cast<std::size_t>(std::lround(2.0 * static_cast<double>(epochs) / 3.0)),
            static_cast<std::size_t>(std::lround(11.0 * static_cast<double>(epochs) / 12.0))};
  }

  double lr_at(std::size_t epoch) const {  // epoch is 0-based
    double v = lr;
    for (std::size_t m : milestones())
      if (epoch >= m) v *= 0.1;
    return v;
  }

  void validate() const {
    model.validate();
    require(batch_size >= 1, ErrorKind::Configuration, "batch size must be positive");
    require(lr > 0 && momentum >= 0 && momentum < 1 && weight_decay >= 0, ErrorKind::Configuration,
            "invalid optimizer settings");
    require(proposals_per_object >= 1, ErrorKind::Configuration, "need at least one proposal per object");
    require(jitter >= 0 && jitter < 1, ErrorKind::Configuration, "jitter must lie in [0, 1)");
    require(threads >= 1, ErrorKind::Configuration, "threads must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},       {"epochs", c.epochs},     {"batch_size", c.batch_size},
       {"lr", c.lr},             {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
       {"seed", c.seed},         {"jitter", c.jitter},     {"proposals_per_object", c.proposals_per_object}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("model").get_to(c.model);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("momentum").get_to(c.momentum);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("seed").get_to(c.seed);
  j.at("jitter").get_to(c.jitter);
  j.at("proposals_per_object").get_to(c.proposals_per_object);
}

/// sha256 of the canonical JSON form.
inline std::string config_digest(const TrainConfig& c) { return sha256_hex(nlohmann::json(c).dump()); }

// ---------------------------------------------------------------------------
// Proposals and targets
// ---------------------------------------------------------------------------

/// Ground-truth box with uniform centre (+-frac of extent) and log-scale
/// (+-frac) noise, clamped to the image.
inline RoI jitter_box(const RoI& gt, double frac, double image_w, double image_h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-frac, frac);
  const double cx = gt.cx() + u(rng) * gt.w, cy = gt.cy() + u(rng) * gt.h;
  const double w = gt.w * std::exp(u(rng)), h = gt.h * std::exp(u(rng));
  RoI r = clamp_to_image({cx - 0.5 * w, cy - 0.5 * h, w, h}, image_w, image_h);
  if (r.w < 1.0 || r.h < 1.0) r = gt;
  return r;
}

struct RoiTarget {
  int cls = 0;
  std::array<double, 4> deltas{};
};

struct ProposalSet {
  std::vector<RoI> boxes;
  std::vector<RoiTarget> targets;
  std::vector<std::size_t> gt_index;
};

inline std::mt19937_64 proposal_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t image) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(image),
                    static_cast<std::uint32_t>(image >> 32), 0x9e3779b9u};
  return std::mt19937_64(seq);
}

inline ProposalSet make_proposals(const Scene& scene, std::size_t per_object, double jitter, std::mt19937_64& rng) {
  ProposalSet ps;
  const auto w = static_cast<double>(scene.image.extent(2)), h = static_cast<double>(scene.image.extent(1));
  for (std::size_t g = 0; g < scene.annotations.size(); ++g) {
    const auto& a = scene.annotations[g];
    for (std::size_t p = 0; p < per_object; ++p) {
      const RoI box = jitter_box(a.box, jitter, w, h, rng);
      ps.boxes.push_back(box);
      ps.targets.push_back({a.cls, encode_deltas(box, a.box)});
      ps.gt_index.push_back(g);
    }
  }
  return ps;
}

/// Fixed proposals for evaluation, independent of the training seed.
inline constexpr std::uint64_t kEvalProposalSeed = 0xE7A1;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0, reg = 0, cls_pre = 0, cls_refine = 0;
  std::size_t rois = 0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    total += o.total;
    reg += o.reg;
    cls_pre += o.cls_pre;
    cls_refine += o.cls_refine;
    rois += o.rois;
    return *this;
  }
  LossBreakdown averaged() const {
    if (rois == 0) return {};
    const auto n = static_cast<double>(rois);
    return {total / n, reg / n, cls_pre / n, cls_refine / n, rois};
  }
};

inline constexpr double kSmoothL1Beta = 1.0;

/// Recorded per-ROI loss: smooth-L1(deltas) + gamma * CE(pre) + sum_t CE(refine_t).
template <class T>
Var roi_loss(Tape<T>& tape, const RoiForward& r, const RoiTarget& target, double pre_weight, LossBreakdown& acc) {
  const auto cls = static_cast<std::size_t>(target.cls);
  Tensor<T> reg_target({4});
  for (int i = 0; i < 4; ++i) reg_target[i] = static_cast<T>(target.deltas[i]);
  const Var reg = ops::smooth_l1(tape, r.deltas, reg_target, static_cast<T>(kSmoothL1Beta));
  const Var ce_pre = ops::softmax_cross_entropy(tape, r.pre_logits, cls);
  std::vector<Var> terms{reg, ce_pre};
  std::vector<T> coeffs{T{1}, static_cast<T>(pre_weight)};
  double refine = 0;
  for (Var v : r.refine_logits) {
    const Var ce = ops::softmax_cross_entropy(tape, v, cls);
    refine += static_cast<double>(tape.value(ce).item());
    terms.push_back(ce);
    coeffs.push_back(T{1});
  }
  const Var total = ops::linear_combination(tape, terms, coeffs);
  acc.reg += static_cast<double>(tape.value(reg).item());
  acc.cls_pre += static_cast<double>(tape.value(ce_pre).item());
  acc.cls_refine += refine;
  acc.total += static_cast<double>(tape.value(total).item());
  acc.rois += 1;
  return total;
}

/// Weight on the pre-classification CE term: gamma with a refine stage, 1
/// for the single-stage baseline.
inline double pre_loss_weight(const ModelConfig& m) { return m.uses_refine() ? m.hyper.gamma : 1.0; }

/// Batch-averaged total loss from value-level predictions. An empty batch has loss 0.
template <class T>
LossBreakdown total_loss(const std::vector<RoiPrediction<T>>& preds, const std::vector<RoiTarget>& targets,
                         double gamma) {
  require(preds.size() == targets.size(), ErrorKind::Shape, "one target per ROI required");
  LossBreakdown acc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto cls = static_cast<std::size_t>(targets[i].cls);
    Tensor<T> reg_target({4});
    for (int j = 0; j < 4; ++j) reg_target[j] = static_cast<T>(targets[i].deltas[j]);
    Tape<T> tape;
    const Var reg = ops::smooth_l1(tape, tape.constant(preds[i].deltas), reg_target, static_cast<T>(kSmoothL1Beta));
    const double r = static_cast<double>(tape.value(reg).item());
    const double pre = static_cast<double>(softmax_cross_entropy(preds[i].pre_logits, cls));
    double refine = 0;
    for (const auto& l : preds[i].refine_logits) refine += static_cast<double>(softmax_cross_entropy(l, cls));
    acc.reg += r;
    acc.cls_pre += pre;
    acc.cls_refine += refine;
    acc.total += r + gamma * pre + refine;
    acc.rois += 1;
  }
  return acc.averaged();
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

template <class T>
struct ImageGrad {
  std::vector<Tensor<T>> grads;  // aligned with the parameter set
  std::vector<bool> touched;
  LossBreakdown loss;
  std::size_t fallbacks = 0;
};

/// Forward + backward for one image. Gradients are of the summed (not
/// averaged) ROI losses.
template <class T>
ImageGrad<T> image_gradient(const Model<T>& model, const Tensor<T>& image, const ProposalSet& proposals,
                            std::size_t image_id = 0) {
  ImageGrad<T> out;
  const auto& params = model.params();
  out.grads.resize(params.size());
  out.touched.assign(params.size(), false);
  if (proposals.boxes.empty()) return out;

  Tape<T> tape;
  const auto pv = bind_params(tape, params, true);
  const auto fwd = model.forward(tape, pv, tape.constant(image), proposals.boxes);
  out.fallbacks = fwd.fallbacks;
  const double pre_weight = pre_loss_weight(model.config());
  std::vector<Var> terms;
  for (std::size_t i = 0; i < fwd.rois.size(); ++i) {
    LossBreakdown one;
    terms.push_back(roi_loss(tape, fwd.rois[i], proposals.targets[i], pre_weight, one));
    if (!std::isfinite(one.total))
      fail(ErrorKind::Numeric, "non-finite loss at image " + std::to_string(image_id) + ", ROI " + std::to_string(i));
    out.loss += one;
  }
  const Var total = ops::sum(tape, terms);
  tape.backward(total);
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (const Tensor<T>* g = tape.grad(pv[p])) {
      out.grads[p] = *g;
      out.touched[p] = true;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with momentum and L2 weight decay. Parameters whose gradient was
/// never reached in a step are left untouched (no decay either).
template <class T>
class Sgd {
 public:
  Sgd(const ParamSet<T>& params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& e : params) velocity_.emplace_back(e.value.shape());
  }

  void step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads, const std::vector<bool>& touched, double lr,
            double grad_scale) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (!touched[p]) continue;
      auto& w = params[p].value;
      auto& v = velocity_[p];
      const auto& g = grads[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * grad_scale + weight_decay_ * static_cast<double>(w[i]);
        v[i] = static_cast<T>(momentum_ * static_cast<double>(v[i]) + gi);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * static_cast<double>(v[i]));
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Detection and evaluation
// ---------------------------------------------------------------------------

struct DetectorOutput {
  std::vector<Detection> detections;
  std::size_t fallbacks = 0;
};

/// Runs the model on fixed jittered ground-truth proposals and emits one
/// scored detection per (proposal, class).
template <class T>
DetectorOutput run_detector(const Model<T>& model, const std::vector<Scene>& scenes,
                            std::uint64_t proposal_seed = kEvalProposalSeed) {
  DetectorOutput out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    auto rng = proposal_rng(proposal_seed, 0, i);
    const ProposalSet ps = make_proposals(s, 1, 0.2, rng);
    if (ps.boxes.empty()) continue;
    const auto preds = model.predict(s.image.template cast<T>(), ps.boxes);
    const auto w = static_cast<double>(s.image.extent(2)), h = static_cast<double>(s.image.extent(1));
    for (std::size_t r = 0; r < preds.size(); ++r) {
      out.fallbacks += preds[r].fallbacks;
      std::array<double, 4> d;
      for (int j = 0; j < 4; ++j) d[j] = static_cast<double>(preds[r].deltas[j]);
      const RoI box = clamp_to_image(decode_deltas(ps.boxes[r], d), w, h);
      const Tensor<T> probs = softmax(preds[r].final_logits);
      for (std::size_t c = 0; c < probs.size(); ++c)
        out.detections.push_back({i, static_cast<int>(c), static_cast<double>(probs[c]), box});
    }
  }
  return out;
}

template <class T>
EvalReport evaluate(const Model<T>& model, const Dataset& data) {
  require(data.config.num_classes == model.config().num_classes, ErrorKind::Configuration,
          "dataset has " + std::to_string(data.config.num_classes) + " classes, model expects " +
              std::to_string(model.config().num_classes));
  const auto out = run_detector(model, data.scenes);
  std::vector<std::vector<Annotation>> gt;
  for (const auto& s : data.scenes) gt.push_back(s.annotations);
  EvalReport r = evaluate_detections(out.detections, gt, model.config().num_classes);
  r.fallbacks = out.fallbacks;
  return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown loss;     // averaged over the epoch's ROIs
  EvalReport eval;
  std::size_t fallbacks = 0;
};

inline std::string metrics_csv_header() {
  return "epoch,loss_total,loss_reg,loss_cls_pre,loss_cls_refine,mAP,AP50,AP75,fallbacks";
}

inline std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu", m.epoch, m.loss.total, m.loss.reg,
                m.loss.cls_pre, m.loss.cls_refine, m.eval.map, m.eval.ap50, m.eval.ap75, m.fallbacks);
  return buf;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& m : log) out += metrics_csv_row(m) + "\n";
  return out;
}

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<EpochMetrics> log;
};

using ProgressFn = std::function<void(const EpochMetrics&)>;

/// Joint training of every active stage. Deterministic for a fixed config:
/// per-image gradients are merged in image order regardless of threads.
template <class T>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<Scene>& train_scenes,
                     const std::vector<Scene>& eval_scenes, const ProgressFn& progress = {}) {
  cfg.validate();
  require(!train_scenes.empty(), ErrorKind::Configuration, "training set is empty");
  for (const auto& s : train_scenes)
    for (const auto& a : s.annotations)
      require(a.cls >= 0 && static_cast<std::size_t>(a.cls) < cfg.model.num_classes, ErrorKind::Configuration,
              "annotation class outside the model's class range");

  Model<T> model(cfg.model, cfg.seed);
  Sgd<T> opt(model.params(), cfg.momentum, cfg.weight_decay);
  std::vector<Tensor<T>> images;
  for (const auto& s : train_scenes) images.push_back(s.image.template cast<T>());
  Dataset eval_ds;
  eval_ds.config.num_classes = cfg.model.num_classes;
  eval_ds.scenes = eval_scenes;

  std::vector<EpochMetrics> log;
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5bd1e995ULL);
  std::vector<std::size_t> order(train_scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t iteration = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = cfg.lr_at(epoch);
    LossBreakdown epoch_loss;
    std::size_t epoch_fallbacks = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++iteration) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<ImageGrad<T>> per_image(end - start);
      auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
          const std::size_t img = order[start + b];
          auto rng = proposal_rng(cfg.seed, epoch + 1, img);
          const ProposalSet ps = make_proposals(train_scenes[img], cfg.proposals_per_object, cfg.jitter, rng);
          per_image[b] = image_gradient(model, images[img], ps, img);
        }
      };
      const std::size_t count = end - start;
      const std::size_t nt = std::min(cfg.threads, count);
      if (nt <= 1) {
        work(0, count);
      } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(nt);
        for (std::size_t t = 0; t < nt; ++t) {
          pool.emplace_back([&, t] {
            try {
              work(count * t / nt, count * (t + 1) / nt);
            } catch (...) {
              errors[t] = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
      }

      LossBreakdown batch_loss;
      std::vector<Tensor<T>> grads(model.params().size());
      std::vector<bool> touched(model.params().size(), false);
      for (auto& ig : per_image) {
        batch_loss += ig.loss;
        epoch_fallbacks += ig.fallbacks;
        for (std::size_t p = 0; p < grads.size(); ++p) {
          if (!ig.touched[p]) continue;
          if (!touched[p]) {
            grads[p] = std::move(ig.grads[p]);
            touched[p] = true;
          } else {
            for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += ig.grads[p][i];
          }
        }
      }
      epoch_loss += batch_loss;
      if (batch_loss.rois == 0) continue;
      if (!std::isfinite(batch_loss.total))
        fail(ErrorKind::Numeric, "non-finite loss at iteration " + std::to_string(iteration));
      opt.step(model.params(), grads, touched, lr, 1.0 / static_cast<double>(batch_loss.rois));
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.loss = epoch_loss.averaged();
    m.eval = evaluate(model, eval_ds);
    m.fallbacks = epoch_fallbacks;
    log.push_back(m);
    if (progress) progress(m);
  }
  return {std::move(model), std::move(log)};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Layout: "FLEXCKPT", uint32 version, uint64 header length, JSON header
// (config, config digest, parameter manifest), then every parameter tensor in
// manifest order using the tensor wire format.
inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'E', 'X', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  TrainConfig config;
  std::string config_digest;
  std::size_t epochs_trained = 0;
};

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const TrainConfig& cfg,
                     std::size_t epochs_trained) {
  nlohmann::json header;
  header["config"] = cfg;
  header["config_digest"] = config_digest(cfg);
  header["epochs_trained"] = epochs_trained;
  header["params"] = nlohmann::json::array();
  for (const auto& e : model.params()) header["params"].push_back({{"name", e.name}, {"shape", e.value.shape()}});
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) fail(ErrorKind::PersistedState, "cannot write " + tmp);
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : model.params()) write_tensor(os, e.value);
    if (!os) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      fail(ErrorKind::PersistedState, "checkpoint write failed: " + tmp);
    }
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
std::pair<Model<T>, CheckpointInfo> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Usage, "checkpoint not found: " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, kCheckpointMagic))
    fail(ErrorKind::PersistedState, path.string() + " is not a checkpoint");
  if (detail::read_pod<std::uint32_t>(is) != kCheckpointVersion)
    fail(ErrorKind::PersistedState, "unsupported checkpoint version");
  const auto len = detail::read_pod<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) fail(ErrorKind::PersistedState, "truncated checkpoint header");
  CheckpointInfo info;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    info.config = header.at("config").get<TrainConfig>();
    info.config_digest = header.at("config_digest").get<std::string>();
    info.epochs_trained = header.at("epochs_trained").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::PersistedState, "malformed checkpoint header: " + std::string(e.what()));
  }
  require(info.config_digest == config_digest(info.config), ErrorKind::PersistedState,
          "checkpoint config digest mismatch in " + path.string());
  Model<T> model(info.config.model, info.config.seed);
  const auto& manifest = header.at("params");
  require(manifest.size() == model.params().size(), ErrorKind::PersistedState,
          "checkpoint manifest does not match its config");
  for (std::size_t p = 0; p < manifest.size(); ++p) {
    auto& e = model.params()[p];
    require(manifest[p].at("name").get<std::string>() == e.name, ErrorKind::PersistedState,
            "checkpoint parameter order mismatch at " + e.name);
    Tensor<T> t = read_tensor<T>(is);
    require(t.shape() == e.value.shape(), ErrorKind::PersistedState, "checkpoint shape mismatch for " + e.name);
    e.value = std::move(t);
  }
  return {std::move(model), info};
}

}  // namespace flex
