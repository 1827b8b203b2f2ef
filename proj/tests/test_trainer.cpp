#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "flex/trainer.hpp"

using namespace flex;
namespace fs = std::filesystem;

namespace {

SynthConfig toy_synth() {
  SynthConfig s;
  s.image_size = 64;
  s.min_objects = 1;
  s.max_objects = 3;
  s.min_extent = 8;
  s.max_extent = 24;
  return s;
}

ModelConfig toy_model(Ablation a = Ablation::Full) {
  ModelConfig m;
  m.channels = 32;
  m.hyper.delta = 6;
  m.head_hidden = 32;
  m.feedback_hidden = 16;
  m.pool_size = 4;
  m.ablation = a;
  return m;
}

TrainConfig toy_train(Ablation a = Ablation::Full, std::size_t epochs = 2) {
  TrainConfig c;
  c.model = toy_model(a);
  c.epochs = epochs;
  c.seed = 3;
  return c;
}

const Dataset& toy_train_set() {
  static const Dataset ds = make_dataset(24, BlurSpec{1}, 11, toy_synth());
  return ds;
}

const Dataset& toy_eval_set() {
  static const Dataset ds = make_dataset(8, BlurSpec{1}, 12, toy_synth());
  return ds;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("flex_trainer_" + name + "_" + std::to_string(::getpid()));
}

Annotation ann(int cls, RoI box) { return Annotation{box, cls}; }

}  // namespace

TEST(TrainConfig, ScheduleAndJson) {
  TrainConfig c;
  EXPECT_EQ(c.model.hyper.gamma, 0.5);
  EXPECT_EQ(c.milestones(), (std::vector<std::size_t>{8, 11}));
  EXPECT_DOUBLE_EQ(c.lr_at(0), 0.01);
  EXPECT_DOUBLE_EQ(c.lr_at(7), 0.01);
  EXPECT_NEAR(c.lr_at(8), 0.001, 1e-15);
  EXPECT_NEAR(c.lr_at(11), 1e-4, 1e-15);
  c.seed = 77;
  c.model.ablation = Ablation::ClassFeedback;
  c.model.parameterization = Parameterization::Gaussian;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(config_digest(back), config_digest(c));
  c.lr = 0.02;
  EXPECT_NE(config_digest(back), config_digest(c));
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Proposals, JitterStaysBoundedAndDeterministic) {
  std::mt19937_64 rng(1);
  const RoI gt{20, 10, 16, 24};
  for (int t = 0; t < 500; ++t) {
    const RoI r = jitter_box(gt, 0.2, 64, 64, rng);
    EXPECT_GE(r.x, 0.0);
    EXPECT_GE(r.y, 0.0);
    EXPECT_LE(r.x + r.w, 64.0 + 1e-12);
    EXPECT_LE(r.y + r.h, 64.0 + 1e-12);
    EXPECT_LE(std::abs(r.cx() - gt.cx()), 0.2 * gt.w + 1e-12);
    EXPECT_LE(r.w, gt.w * std::exp(0.2) + 1e-12);
    EXPECT_GE(r.w, gt.w * std::exp(-0.2) - 1e-12);
  }
  const Scene& s = toy_train_set().scenes[0];
  auto a = proposal_rng(5, 1, 0), b = proposal_rng(5, 1, 0), c = proposal_rng(5, 2, 0);
  const auto pa = make_proposals(s, 2, 0.2, a), pb = make_proposals(s, 2, 0.2, b), pc = make_proposals(s, 2, 0.2, c);
  EXPECT_EQ(pa.boxes, pb.boxes);
  EXPECT_NE(pa.boxes, pc.boxes);
  ASSERT_EQ(pa.boxes.size(), 2 * s.annotations.size());
  for (std::size_t i = 0; i < pa.boxes.size(); ++i) {
    const auto& gt_box = s.annotations[pa.gt_index[i]].box;
    const RoI back = decode_deltas(pa.boxes[i], pa.targets[i].deltas);
    EXPECT_NEAR(back.x, gt_box.x, 1e-9);
    EXPECT_NEAR(back.w, gt_box.w, 1e-9);
    EXPECT_EQ(pa.targets[i].cls, s.annotations[pa.gt_index[i]].cls);
  }
}

TEST(TotalLoss, MatchesHandFormula) {
  RoiPrediction<double> p;
  p.pre_logits = Tensor<double>::vector({1.0, 2.0, 0.5});
  p.deltas = Tensor<double>::vector({0.5, -2.0, 0.0, 0.25});
  p.refine_logits = {Tensor<double>::vector({0.0, 0.0, 3.0})};
  p.final_logits = p.refine_logits.back();
  RoiTarget t{2, {0.0, 0.0, 0.0, 0.0}};
  auto ce = [](std::vector<double> z, std::size_t k) {
    double s = 0;
    for (double v : z) s += std::exp(v);
    return std::log(s) - z[k];
  };
  // smooth-L1 with beta 1: 0.5x^2 inside |x| < 1, |x| - 0.5 outside; summed over coordinates.
  const double reg = 0.125 + 1.5 + 0.0 + 0.03125;
  const double want = reg + 0.5 * ce({1, 2, 0.5}, 2) + ce({0, 0, 3}, 2);
  const auto l = total_loss<double>({p, p}, {t, t}, 0.5);
  EXPECT_NEAR(l.total, want, 1e-12);
  EXPECT_NEAR(l.reg, reg, 1e-12);
  EXPECT_EQ(l.rois, 2u);
  EXPECT_NEAR(total_loss<double>({p}, {t}, 0.0).total, reg + ce({0, 0, 3}, 2), 1e-12);
}

TEST(TotalLoss, EmptyBatchIsZeroAndPerfectIsZero) {
  const auto e = total_loss<double>({}, {}, 0.5);
  EXPECT_EQ(e.total, 0.0);
  EXPECT_EQ(e.rois, 0u);
  RoiPrediction<double> p;
  p.pre_logits = Tensor<double>::vector({-40.0, 40.0});
  p.deltas = Tensor<double>::vector({0.1, 0.2, -0.3, 0.0});
  p.refine_logits = {Tensor<double>::vector({-40.0, 40.0})};
  RoiTarget t{1, {0.1, 0.2, -0.3, 0.0}};
  const auto l = total_loss<double>({p}, {t}, 0.5);
  EXPECT_EQ(l.reg, 0.0);
  EXPECT_LT(l.cls_pre, 1e-30);
  EXPECT_LT(l.total, 1e-30);
  EXPECT_THROW(total_loss<double>({p}, {}, 0.5), Error);
}

TEST(TotalLoss, RecordedLossAgreesWithValueLoss) {
  const Model<double> model(toy_model(), 4);
  const Scene& s = toy_train_set().scenes[1];
  auto rng = proposal_rng(1, 1, 1);
  const auto ps = make_proposals(s, 2, 0.2, rng);
  const auto g = image_gradient(model, s.image, ps);
  const auto v = total_loss(model.predict(s.image, ps.boxes), ps.targets, 0.5);
  EXPECT_NEAR(g.loss.averaged().total, v.total, 1e-12);
  EXPECT_NEAR(g.loss.averaged().cls_refine, v.cls_refine, 1e-12);
}

TEST(Gradients, EveryParameterGroupIsLive) {
  const Model<double> model(toy_model(), 5);
  const Scene& s = toy_train_set().scenes[2];
  auto rng = proposal_rng(1, 1, 2);
  const auto g = image_gradient(model, s.image, make_proposals(s, 2, 0.2, rng));
  for (std::size_t p = 0; p < model.params().size(); ++p) {
    ASSERT_TRUE(g.touched[p]) << model.params()[p].name;
    double norm = 0;
    for (double v : g.grads[p].data()) norm += v * v;
    EXPECT_GT(norm, 0.0) << model.params()[p].name;
  }
}

TEST(Gradients, GammaZeroSilencesPreClassifierWithoutFeedback) {
  ModelConfig cfg = toy_model(Ablation::MultiLevel);
  cfg.hyper.gamma = 0.0;
  const Model<double> model(cfg, 6);
  const Scene& s = toy_train_set().scenes[3];
  auto rng = proposal_rng(1, 1, 3);
  const auto g = image_gradient(model, s.image, make_proposals(s, 1, 0.2, rng));
  for (const char* name : {"pre.cls.w", "pre.cls.b"}) {
    const std::size_t p = model.params().index(name);
    if (!g.touched[p]) continue;
    for (double v : g.grads[p].data()) EXPECT_EQ(v, 0.0) << name;
  }
  // With class feedback the pre-classifier is still reached through the refine path.
  cfg.ablation = Ablation::ClassFeedback;
  const Model<double> fb(cfg, 6);
  auto rng2 = proposal_rng(1, 1, 3);
  const auto g2 = image_gradient(fb, s.image, make_proposals(s, 1, 0.2, rng2));
  double norm = 0;
  for (double v : g2.grads[fb.params().index("pre.cls.w")].data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Sgd, MomentumAndDecayOracle) {
  ParamSet<double> params;
  params.add("a", Tensor<double>::vector({1.0, -2.0}));
  params.add("b", Tensor<double>::vector({5.0}));
  Sgd<double> opt(params, 0.9, 0.1);
  const std::vector<Tensor<double>> g{Tensor<double>::vector({0.5, 1.0}), Tensor<double>::vector({3.0})};
  opt.step(params, g, {true, false}, 0.1, 2.0);
  // v = 2g + 0.1w; w -= 0.1 v
  const double v0 = 2 * 0.5 + 0.1 * 1.0, v1 = 2 * 1.0 + 0.1 * -2.0;
  EXPECT_NEAR(params.at("a")[0], 1.0 - 0.1 * v0, 1e-15);
  EXPECT_NEAR(params.at("a")[1], -2.0 - 0.1 * v1, 1e-15);
  EXPECT_EQ(params.at("b")[0], 5.0);
  const double w0 = 1.0 - 0.1 * v0;
  opt.step(params, g, {true, false}, 0.1, 2.0);
  const double v0b = 0.9 * v0 + 2 * 0.5 + 0.1 * w0;
  EXPECT_NEAR(params.at("a")[0], w0 - 0.1 * v0b, 1e-15);
}

TEST(Evaluate, HandBuiltThreeDetectionFixture) {
  // Two ground-truth boxes of class 0; detections TP (0.9), FP (0.8), TP (0.7).
  // Precision/recall: (1, .5), (.5, .5), (2/3, 1). Interpolated precision is 1
  // for recall <= .5 (51 points) and 2/3 above (50 points).
  const std::vector<std::vector<Annotation>> gt{{ann(0, {0, 0, 10, 10}), ann(0, {20, 20, 10, 10})}};
  const std::vector<Detection> dets{{0, 0, 0.9, {0, 0, 10, 10}}, {0, 0, 0.8, {40, 40, 5, 5}}, {0, 0, 0.7, {20, 20, 10, 10}}};
  const auto r = evaluate_detections(dets, gt, 2);
  const double want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
  EXPECT_NEAR(r.ap50, want, 1e-12);
  EXPECT_NEAR(r.map, want, 1e-12);
  EXPECT_EQ(r.per_class[1], -1.0);
}

TEST(Evaluate, LocalizationThresholdsSplitMap) {
  // One detection with IoU 0.64 counts at 0.50..0.60 (3 of 10 thresholds).
  const std::vector<std::vector<Annotation>> gt{{ann(1, {0, 0, 10, 10})}};
  const std::vector<Detection> dets{{0, 1, 0.5, {0, 0, 10, 6.4}}};
  const auto r = evaluate_detections(dets, gt, 2);
  EXPECT_NEAR(r.ap50, 1.0, 1e-12);
  EXPECT_NEAR(r.ap75, 0.0, 1e-12);
  EXPECT_NEAR(r.map, 0.3, 1e-12);
  double mean = 0;
  for (double a : r.ap_at) mean += a / 10.0;
  EXPECT_NEAR(mean, r.map, 1e-15);
}

TEST(Evaluate, PerfectAndEmptyDetectors) {
  const auto& ds = toy_eval_set();
  std::vector<std::vector<Annotation>> gt;
  std::vector<Detection> perfect;
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    gt.push_back(ds.scenes[i].annotations);
    for (const auto& a : ds.scenes[i].annotations) perfect.push_back({i, a.cls, 1.0, a.box});
  }
  const auto p = evaluate_detections(perfect, gt, 6);
  EXPECT_DOUBLE_EQ(p.map, 1.0);
  const auto e = evaluate_detections({}, gt, 6);
  EXPECT_EQ(e.map, 0.0);
  for (double a : p.ap_at) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Evaluate, ClassCountMismatchIsConfigurationError) {
  ModelConfig cfg = toy_model();
  cfg.num_classes = 4;
  const Model<double> model(cfg, 1);
  try {
    evaluate(model, toy_eval_set());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Configuration);
  }
}

TEST(Train, BaselineLeavesFeedbackAndRefineUntouched) {
  const TrainConfig cfg = toy_train(Ablation::Baseline, 1);
  const Model<double> init(cfg.model, cfg.seed);
  const auto res = train<double>(cfg, toy_train_set().scenes, toy_eval_set().scenes);
  std::size_t frozen = 0;
  for (std::size_t p = 0; p < init.params().size(); ++p) {
    const auto& name = init.params()[p].name;
    const bool feedback = name.starts_with("imgfb") || name.starts_with("clsfb") || name.starts_with("refine");
    if (feedback) {
      EXPECT_EQ(res.model.params()[p].value, init.params()[p].value) << name;
      ++frozen;
    } else if (name.starts_with("pre.")) {
      EXPECT_NE(res.model.params()[p].value, init.params()[p].value) << name;
    }
  }
  EXPECT_GT(frozen, 0u);
}

TEST(Train, DeterministicAcrossRunsAndThreads) {
  TrainConfig cfg = toy_train(Ablation::Full, 2);
  const auto a = train<double>(cfg, toy_train_set().scenes, toy_eval_set().scenes);
  const auto b = train<double>(cfg, toy_train_set().scenes, toy_eval_set().scenes);
  cfg.threads = 3;
  const auto c = train<double>(cfg, toy_train_set().scenes, toy_eval_set().scenes);
  EXPECT_EQ(metrics_csv(a.log), metrics_csv(b.log));
  EXPECT_EQ(metrics_csv(a.log), metrics_csv(c.log));
  for (std::size_t p = 0; p < a.model.params().size(); ++p)
    EXPECT_EQ(a.model.params()[p].value, c.model.params()[p].value);
  cfg.threads = 1;
  cfg.seed = 4;
  EXPECT_NE(metrics_csv(train<double>(cfg, toy_train_set().scenes, toy_eval_set().scenes).log), metrics_csv(a.log));
}

TEST(Train, LossDecreasesOverFirstThreeEpochs) {
  // Default generator and model settings.
  const auto data = make_dataset(64, BlurSpec{1}, 11, SynthConfig{});
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 3;
  const auto res = train<float>(cfg, data.scenes, {});
  ASSERT_EQ(res.log.size(), 3u);
  EXPECT_LT(res.log[1].loss.total, res.log[0].loss.total);
  EXPECT_LT(res.log[2].loss.total, res.log[1].loss.total);
}

TEST(Train, ToyRunStaysFinite) {
  const auto res = train<double>(toy_train(Ablation::Full, 12), toy_train_set().scenes, toy_eval_set().scenes);
  ASSERT_EQ(res.log.size(), 12u);
  for (const auto& m : res.log) {
    EXPECT_TRUE(std::isfinite(m.loss.total));
    EXPECT_GE(m.eval.map, 0.0);
    EXPECT_LE(m.eval.map, 1.0);
  }
}

TEST(Train, MetricsCsvLayout) {
  const auto res = train<double>(toy_train(Ablation::MultiLevel, 1), toy_train_set().scenes, toy_eval_set().scenes);
  const std::string csv = metrics_csv(res.log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "epoch,loss_total,loss_reg,loss_cls_pre,loss_cls_refine,mAP,AP50,AP75,fallbacks");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 2), "1,");
}

TEST(Train, Errors) {
  EXPECT_THROW(train<double>(toy_train(), {}, {}), Error);
  std::vector<Scene> bad{toy_train_set().scenes[0]};
  bad[0].annotations[0].cls = 9;
  try {
    train<double>(toy_train(), bad, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Configuration);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const TrainConfig cfg = toy_train(Ablation::Full, 1);
  const auto res = train<double>(cfg, toy_train_set().scenes, toy_eval_set().scenes);
  const auto path = temp_file("rt");
  save_checkpoint(path, res.model, cfg, 1);
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
  const auto [model, info] = load_checkpoint<double>(path);
  EXPECT_EQ(info.epochs_trained, 1u);
  EXPECT_EQ(info.config_digest, config_digest(cfg));
  EXPECT_EQ(info.config.model, cfg.model);
  for (std::size_t p = 0; p < model.params().size(); ++p) {
    EXPECT_EQ(model.params()[p].name, res.model.params()[p].name);
    EXPECT_EQ(model.params()[p].value, res.model.params()[p].value);
  }
  const auto& s = toy_eval_set().scenes[0];
  std::vector<RoI> boxes;
  for (const auto& a : s.annotations) boxes.push_back(a.box);
  const auto p1 = model.predict(s.image, boxes), p2 = res.model.predict(s.image, boxes);
  for (std::size_t r = 0; r < boxes.size(); ++r) EXPECT_EQ(p1[r].final_logits, p2[r].final_logits);
  fs::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const TrainConfig cfg = toy_train(Ablation::MultiLevel, 1);
  const Model<double> model(cfg.model, 1);
  const auto path = temp_file("bad");
  save_checkpoint(path, model, cfg, 0);
  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  auto expect_kind = [&](const std::string& content, ErrorKind kind) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << content;
    try {
      load_checkpoint<double>(path);
      ADD_FAILURE() << "load succeeded";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), kind);
    }
  };
  expect_kind(bytes.substr(0, bytes.size() / 2), ErrorKind::PersistedState);
  std::string magic = bytes;
  magic[0] = 'X';
  expect_kind(magic, ErrorKind::PersistedState);
  std::string tampered = bytes;
  const auto pos = tampered.find("\"lr\":0.01");
  ASSERT_NE(pos, std::string::npos);
  tampered.replace(pos, 9, "\"lr\":0.02");
  expect_kind(tampered, ErrorKind::PersistedState);
  fs::remove(path);
  try {
    load_checkpoint<double>(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Usage);
  }
}
