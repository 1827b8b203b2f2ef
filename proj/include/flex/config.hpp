#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flex/digest.hpp"
#include "flex/synthgen.hpp"
#include "flex/trainer.hpp"

namespace flex {

/// Everything a CLI run needs. Serialized as JSON; every key is optional in
/// a config file and unknown keys are rejected.
struct RunConfig {
  TrainConfig train;
  SynthConfig synth;
  std::size_t scenes = 200;
  int blur = 1;
  std::vector<std::string> train_data;  // dataset directories, concatenated
  std::vector<std::string> eval_data;
  std::string output = "out";
  std::string checkpoint;
  std::vector<int> kernels{1, 5, 9, 21};
  double fraction = 0.1;
  std::size_t bins = 16;

  void validate() const {
    train.validate();
    synth.validate();
    BlurSpec{blur}.validate();
    for (int k : kernels) BlurSpec{k}.validate();
    require(fraction > 0 && fraction <= 1, ErrorKind::Configuration, "fraction must lie in (0, 1]");
    require(bins >= 1, ErrorKind::Configuration, "bins must be positive");
  }
};

inline nlohmann::json to_json_doc(const RunConfig& c) {
  nlohmann::json model = c.train.model;
  nlohmann::json train = c.train;
  train.erase("model");
  train.erase("seed");
  return {{"seed", c.train.seed},
          {"threads", c.train.threads},
          {"model", model},
          {"train", train},
          {"synth", c.synth},
          {"data", {{"scenes", c.scenes}, {"blur", c.blur}, {"train", c.train_data}, {"eval", c.eval_data}}},
          {"analysis", {{"kernels", c.kernels}, {"fraction", c.fraction}, {"bins", c.bins}}},
          {"output", c.output},
          {"checkpoint", c.checkpoint}};
}

namespace detail {

/// Overlays `patch` onto `base`, failing on any key `base` does not have.
inline void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) fail(ErrorKind::Configuration, "expected an object at '" + where + "'");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) fail(ErrorKind::Configuration, "unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object())
      merge_strict(slot, it.value(), key);
    else
      slot = it.value();
  }
}

}  // namespace detail

inline RunConfig from_json_doc(const nlohmann::json& doc) {
  RunConfig c;
  try {
    c.train.model = doc.at("model").get<ModelConfig>();
    nlohmann::json train = doc.at("train");
    train["model"] = doc.at("model");
    train["seed"] = doc.at("seed");
    c.train = train.get<TrainConfig>();
    c.train.threads = doc.at("threads").get<std::size_t>();
    c.synth = doc.at("synth").get<SynthConfig>();
    const auto& data = doc.at("data");
    data.at("scenes").get_to(c.scenes);
    data.at("blur").get_to(c.blur);
    data.at("train").get_to(c.train_data);
    data.at("eval").get_to(c.eval_data);
    const auto& a = doc.at("analysis");
    a.at("kernels").get_to(c.kernels);
    a.at("fraction").get_to(c.fraction);
    a.at("bins").get_to(c.bins);
    doc.at("output").get_to(c.output);
    doc.at("checkpoint").get_to(c.checkpoint);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Configuration, std::string("bad config value: ") + e.what());
  }
  return c;
}

/// Defaults overlaid with a JSON config file.
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Configuration, "cannot read config " + path.string());
  nlohmann::json patch;
  try {
    patch = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Configuration, "malformed config " + path.string() + ": " + e.what());
  }
  nlohmann::json doc = to_json_doc(RunConfig{});
  detail::merge_strict(doc, patch, "");
  return from_json_doc(doc);
}

inline std::string run_config_digest(const RunConfig& c) { return sha256_hex(to_json_doc(c).dump()); }

}  // namespace flex
