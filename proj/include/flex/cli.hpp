#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flex/analysis.hpp"
#include "flex/config.hpp"
#include "flex/error.hpp"
#include "flex/trainer.hpp"

namespace flex::cli {

namespace fs = std::filesystem;

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::PersistedState, "cannot write " + path.string());
  os << text;
  if (!os) fail(ErrorKind::PersistedState, "write to " + path.string() + " failed");
}

/// Timestamps and run bookkeeping live only here, never in the outputs.
inline void write_meta(const fs::path& primary, const std::string& command, const std::string& started,
                       const std::string& config_digest) {
  nlohmann::json meta{{"command", command},
                      {"started", started},
                      {"finished", utc_now()},
                      {"config_digest", config_digest},
                      {"output", primary.filename().string()}};
  write_text(primary.string() + ".meta.json", meta.dump(1) + "\n");
}

struct LoadedData {
  std::vector<Scene> scenes;
  std::vector<Dataset> parts;
  std::string digest;  // index digest; combined when several directories are given
};

inline LoadedData load_data(const std::vector<std::string>& dirs) {
  if (dirs.empty()) fail(ErrorKind::Usage, "no dataset given (--data)");
  LoadedData d;
  std::string joined;
  for (const auto& dir : dirs) {
    if (!fs::exists(fs::path(dir) / "index")) fail(ErrorKind::Usage, "no dataset at " + dir);
    Dataset ds = load_dataset(dir);
    d.scenes.insert(d.scenes.end(), ds.scenes.begin(), ds.scenes.end());
    joined += ds.index_digest;
    d.parts.push_back(std::move(ds));
  }
  d.digest = dirs.size() == 1 ? d.parts.front().index_digest : sha256_hex(joined);
  return d;
}

inline void require_class_count(const LoadedData& d, std::size_t classes) {
  for (const auto& p : d.parts)
    require(p.config.num_classes == classes, ErrorKind::Configuration,
            "dataset has " + std::to_string(p.config.num_classes) + " classes, model expects " +
                std::to_string(classes));
}

inline std::string join_kernels(const std::vector<int>& k) {
  std::string s;
  for (std::size_t i = 0; i < k.size(); ++i) s += (i ? "_" : "") + std::to_string(k[i]);
  return s;
}

inline std::string eval_report_csv(const EvalReport& r) {
  std::string out = "metric,value\n";
  auto row = [&](const std::string& k, double v) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    out += k + "," + buf + "\n";
  };
  row("AP50", r.ap50);
  row("AP75", r.ap75);
  row("mAP", r.map);
  for (std::size_t t = 0; t < kIouThresholds; ++t) {
    char key[32];
    std::snprintf(key, sizeof key, "AP@%.2f", iou_threshold(t));
    row(key, r.ap_at[t]);
  }
  for (std::size_t c = 0; c < r.per_class.size(); ++c) row("class" + std::to_string(c), r.per_class[c]);
  out += "fallbacks," + std::to_string(r.fallbacks) + "\n";
  return out;
}

/// Entry point shared by the executable and the tests. Returns the exit status.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{
      "FLEX feedback multi-level ROI feature extraction on synthetic scenes.\n"
      "Settings resolve as: command-line flags > --config file > built-in defaults."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "flex 1.0");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> output;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config (unknown keys are rejected)");
    sub->add_option("--seed", seed, "seed for all randomness");
    sub->add_option("--threads", threads, "worker threads (results do not depend on it)");
    sub->add_option("--out", output, "output directory");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  common(synth);
  std::optional<std::size_t> scenes, image_size, min_objects, max_objects, classes;
  std::optional<double> min_extent, max_extent;
  std::optional<int> blur;
  synth->add_option("--scenes", scenes, "number of scenes");
  synth->add_option("--blur", blur, "odd mean-kernel size (1 = clean)");
  synth->add_option("--image-size", image_size, "square image size in pixels");
  synth->add_option("--min-objects", min_objects, "minimum objects per scene");
  synth->add_option("--max-objects", max_objects, "maximum objects per scene");
  synth->add_option("--min-extent", min_extent, "smallest object extent in pixels");
  synth->add_option("--max-extent", max_extent, "largest object extent in pixels");
  synth->add_option("--classes", classes, "number of classes (2..6)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a detector and write checkpoint + metrics CSV");
  common(train_cmd);
  std::vector<std::string> data, eval_data;
  std::optional<std::string> ablation, parameterization;
  std::optional<std::size_t> depth, epochs, batch, channels, levels, pool, head_hidden, fb_hidden, stem;
  std::optional<double> gamma, sigma, delta, lr;
  train_cmd->add_option("--data", data, "training dataset directories");
  train_cmd->add_option("--eval-data", eval_data, "evaluation dataset directories (per-epoch metrics)");
  train_cmd->add_option("--ablation", ablation, "baseline | multi-level | +cls | +cls+img");
  train_cmd->add_option("--parameterization", parameterization, "direct | gaussian | interpolation");
  train_cmd->add_option("--cascade-depth", depth, "number of refine layers");
  train_cmd->add_option("--gamma", gamma, "pre-classification loss weight");
  train_cmd->add_option("--sigma", sigma, "Gaussian level width");
  train_cmd->add_option("--delta", delta, "ROI scale factor in pixels");
  train_cmd->add_option("--epochs", epochs, "training epochs (0 writes the initialized model)");
  train_cmd->add_option("--batch-size", batch, "images per step");
  train_cmd->add_option("--lr", lr, "base learning rate");
  train_cmd->add_option("--channels", channels, "pyramid channels C0");
  train_cmd->add_option("--levels", levels, "pyramid levels N");
  train_cmd->add_option("--stem-stride", stem, "stride of the first backbone stage");
  train_cmd->add_option("--pool-size", pool, "ROI pooling grid S");
  train_cmd->add_option("--head-hidden", head_hidden, "hidden width of the detection heads");
  train_cmd->add_option("--feedback-hidden", fb_hidden, "hidden width of the class feedback network");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (AP50, AP75, mAP)");
  common(eval_cmd);
  std::optional<std::string> checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", data, "dataset directories");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "image-feedback and information-gain analyses");
  analyze->require_subcommand(1);
  std::optional<std::vector<int>> kernels;
  std::optional<double> fraction;
  std::optional<std::size_t> bins;
  auto analysis_cmd = [&](const char* name, const char* help) {
    auto* sub = analyze->add_subcommand(name, help);
    common(sub);
    sub->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    sub->add_option("--data", data, "dataset directories (clean images are regenerated from the seed)");
    return sub;
  };
  auto* a_blur = analysis_cmd("blur", "mean image feedback per blur kernel");
  a_blur->add_option("--kernels", kernels, "comma-separated odd kernel sizes")->delimiter(',');
  auto* a_top = analysis_cmd("top", "blur response of the top fraction by first-level feedback");
  a_top->add_option("--kernels", kernels, "comma-separated odd kernel sizes")->delimiter(',');
  a_top->add_option("--fraction", fraction, "fraction of scenes kept (0, 1]");
  auto* a_ig = analysis_cmd("ig", "information gain vs pre-classification entropy");
  a_ig->add_option("--bins", bins, "entropy bins over [0, log2 K]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    const std::string started = utc_now();
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) cfg.train.seed = *seed;
    if (threads) cfg.train.threads = *threads;
    if (output) cfg.output = *output;
    if (scenes) cfg.scenes = *scenes;
    if (blur) cfg.blur = *blur;
    if (image_size) cfg.synth.image_size = *image_size;
    if (min_objects) cfg.synth.min_objects = *min_objects;
    if (max_objects) cfg.synth.max_objects = *max_objects;
    if (min_extent) cfg.synth.min_extent = *min_extent;
    if (max_extent) cfg.synth.max_extent = *max_extent;
    if (classes) cfg.synth.num_classes = *classes;
    auto& m = cfg.train.model;
    if (ablation) m.ablation = parse_ablation(*ablation);
    if (parameterization) m.parameterization = parse_parameterization(*parameterization);
    if (depth) m.cascade_depth = *depth;
    if (gamma) m.hyper.gamma = *gamma;
    if (sigma) m.hyper.sigma = *sigma;
    if (delta) m.hyper.delta = *delta;
    if (levels) m.hyper.levels = *levels;
    if (channels) m.channels = *channels;
    if (stem) m.stem_stride = *stem;
    if (pool) m.pool_size = *pool;
    if (head_hidden) m.head_hidden = *head_hidden;
    if (fb_hidden) m.feedback_hidden = *fb_hidden;
    if (epochs) cfg.train.epochs = *epochs;
    if (batch) cfg.train.batch_size = *batch;
    if (lr) cfg.train.lr = *lr;
    if (train_cmd->parsed()) {
      if (!data.empty()) cfg.train_data = data;
      if (!eval_data.empty()) cfg.eval_data = eval_data;
    } else if (!data.empty()) {
      cfg.eval_data = data;
    }
    if (checkpoint) cfg.checkpoint = *checkpoint;
    if (kernels) cfg.kernels = *kernels;
    if (fraction) cfg.fraction = *fraction;
    if (bins) cfg.bins = *bins;
    const fs::path outdir = cfg.output;

    if (synth->parsed()) {
      cfg.synth.validate();
      const fs::path dir = outdir;
      const auto index = build_dataset(cfg.scenes, BlurSpec{cfg.blur}, cfg.train.seed, cfg.synth, dir);
      const std::string digest = file_digest(index);
      write_meta(index, "synth", started, run_config_digest(cfg));
      out << "index " << index.string() << "\nsha256 " << digest << "\n";
      return 0;
    }

    if (train_cmd->parsed()) {
      cfg.validate();
      const LoadedData train_data = load_data(cfg.train_data);
      require_class_count(train_data, m.num_classes);
      LoadedData eval_set;
      if (!cfg.eval_data.empty()) {
        eval_set = load_data(cfg.eval_data);
        require_class_count(eval_set, m.num_classes);
      }
      const std::string tag = short_digest(config_digest(cfg.train) + train_data.digest + eval_set.digest);
      fs::create_directories(outdir);
      const fs::path ckpt = outdir / ("checkpoint-" + tag + ".flex");
      const fs::path metrics = outdir / ("metrics-" + tag + ".csv");
      const fs::path cfg_file = outdir / ("config-" + tag + ".json");
      write_text(cfg_file, to_json_doc(cfg).dump(1) + "\n");
      auto result = train<float>(cfg.train, train_data.scenes, eval_set.scenes, [&](const EpochMetrics& e) {
        out << metrics_csv_row(e) << "\n" << std::flush;
      });
      save_checkpoint(ckpt, result.model, cfg.train, result.log.size());
      write_text(metrics, metrics_csv(result.log));
      write_meta(metrics, "train", started, run_config_digest(cfg));
      out << "checkpoint " << ckpt.string() << "\nmetrics " << metrics.string() << "\n";
      return 0;
    }

    // eval / analyze need a checkpoint
    if (cfg.checkpoint.empty() || !fs::exists(cfg.checkpoint))
      fail(ErrorKind::Usage, "checkpoint not found: " + cfg.checkpoint);
    auto [model, info] = load_checkpoint<float>(cfg.checkpoint);
    const std::string ckpt_digest = file_digest(cfg.checkpoint);
    const LoadedData ds = load_data(cfg.eval_data);
    require_class_count(ds, model.config().num_classes);
    ReportProvenance prov{ckpt_digest, ds.digest, info.epochs_trained == 0};
    const std::string base = short_digest(ckpt_digest) + "-" + short_digest(ds.digest);

    if (eval_cmd->parsed()) {
      Dataset merged;
      merged.config = ds.parts.front().config;
      merged.scenes = ds.scenes;
      const EvalReport r = evaluate(model, merged);
      const fs::path file = outdir / ("eval-" + base + ".csv");
      write_text(file, eval_report_csv(r));
      write_meta(file, "eval", started, run_config_digest(cfg));
      out << eval_report_csv(r) << "report " << file.string() << "\n";
      return 0;
    }

    require(model.config().uses_image_feedback() || a_ig->parsed(), ErrorKind::Configuration,
            "blur analyses need a model with image feedback (+cls+img)");
    std::vector<Scene> clean;
    for (const auto& p : ds.parts) {
      auto c = clean_scenes(p);
      clean.insert(clean.end(), c.begin(), c.end());
    }
    nlohmann::json summary{{"checkpoint_digest", prov.checkpoint_digest},
                           {"index_digest", prov.index_digest},
                           {"untrained", prov.untrained},
                           {"config_digest", info.config_digest}};
    fs::path file;
    std::string csv;
    if (a_blur->parsed() || a_top->parsed()) {
      const bool top = a_top->parsed();
      const BlurReport r = top ? top_fraction_blur_response(model, clean, cfg.fraction, cfg.kernels)
                               : blur_response(model, clean, cfg.kernels);
      csv = blur_report_csv(r);
      file = outdir / (std::string(top ? "analysis-top-" : "analysis-blur-") + base + "-k" +
                       join_kernels(cfg.kernels) + ".csv");
      summary["analysis"] = top ? "top" : "blur";
      summary["subset"] = r.subset;
      summary["fraction"] = r.fraction;
      summary["scenes"] = r.scenes;
      summary["small_subset_warning"] = r.small_subset;
      const BlurRow* first = r.rows.empty() ? nullptr : &r.rows.front();
      const BlurRow* last = r.rows.empty() ? nullptr : &r.rows.back();
      if (first && last) {
        summary["first_layer_change"] = last->first - first->first;
        summary["last_layer_change"] = last->last - first->last;
      }
      summary["reference_first_layer_change"] = top ? 0.8490 - 1.1477 : 0.7768 - 0.8289;
      summary["reference_last_layer_change"] = top ? 1.1689 - 0.9897 : 1.2223 - 1.1806;
      if (r.small_subset) err << "warning: subset has only " << r.scenes << " scenes\n";
    } else {
      const InfoGainCurve c = info_gain_curve(model, ds.scenes, cfg.bins);
      csv = info_gain_csv(c);
      file = outdir / ("analysis-ig-" + base + "-b" + std::to_string(cfg.bins) + ".csv");
      summary["analysis"] = "ig";
      summary["rois"] = c.samples.size();
      summary["low_quartile_ig"] = c.low_quartile_ig;
      summary["high_quartile_ig"] = c.high_quartile_ig;
      summary["fallbacks"] = c.fallbacks;
      std::size_t empty = 0;
      for (const auto& b : c.bins) empty += b.count == 0 ? 1 : 0;
      summary["empty_bins"] = empty;
      summary["reference_observation"] = "IG rises with pre-classification entropy, with jumps near log2(2) and log2(3)";
    }
    write_text(file, csv);
    fs::path summary_file = file;
    summary_file.replace_extension(".json");
    write_text(summary_file, summary.dump(1) + "\n");
    write_meta(file, "analyze", started, run_config_digest(cfg));
    if (prov.untrained) err << "note: checkpoint is untrained\n";
    out << csv << "report " << file.string() << "\n";
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace flex::cli
