#pragma once

// JSON bindings for the config structs, shared by model serialization and the
// CLI. Missing keys keep the struct's current value, so partial configs and
// flag overrides compose.

#include <string>

#include "json.hpp"

#include "dcfm/dataio.hpp"
#include "dcfm/engine.hpp"
#include "dcfm/model.hpp"
#include "dcfm/training.hpp"

namespace dcfm {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j["num_classes"] = c.num_classes;
  j["in_channels"] = c.in_channels;
  j["c_f_indep"] = c.c_f_indep;
  j["c_hi"] = c.c_hi;
  j["c_common"] = c.c_common;
  j["indep_half"] = c.indep_half;
  j["use_common"] = c.use_common;
  j["use_indep"] = c.use_indep;
  j["seed"] = c.seed;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.num_classes = j.value("num_classes", c.num_classes);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.c_f_indep = j.value("c_f_indep", c.c_f_indep);
  c.c_hi = j.value("c_hi", c.c_hi);
  c.c_common = j.value("c_common", c.c_common);
  c.indep_half = j.value("indep_half", c.indep_half);
  c.use_common = j.value("use_common", c.use_common);
  c.use_indep = j.value("use_indep", c.use_indep);
  c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j["lambda_b"] = c.lambda_b;
  j["lambda_c"] = c.lambda_c;
  j["base_lr"] = c.base_lr;
  j["momentum"] = c.momentum;
  j["poly_power"] = c.poly_power;
  j["iters"] = c.iters;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["use_li"] = c.use_li;
  j["use_lb"] = c.use_lb;
  j["use_lc"] = c.use_lc;
  j["log_every"] = c.log_every;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lambda_b = j.value("lambda_b", c.lambda_b);
  c.lambda_c = j.value("lambda_c", c.lambda_c);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.poly_power = j.value("poly_power", c.poly_power);
  c.iters = j.value("iters", c.iters);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  c.use_li = j.value("use_li", c.use_li);
  c.use_lb = j.value("use_lb", c.use_lb);
  c.use_lc = j.value("use_lc", c.use_lc);
  c.log_every = j.value("log_every", c.log_every);
}

inline std::string to_string(ScheduleConfig::Policy p) {
  return p == ScheduleConfig::Policy::fixed ? "fixed" : "adaptive";
}

inline std::string to_string(ScheduleConfig::Mode m) {
  return m == ScheduleConfig::Mode::P ? "P" : "B";
}

inline ScheduleConfig::Policy policy_from_string(const std::string& s) {
  if (s == "fixed") return ScheduleConfig::Policy::fixed;
  if (s == "adaptive" || s == "aks") return ScheduleConfig::Policy::adaptive;
  throw ConfigError("unknown schedule policy '" + s + "' (want fixed|aks)");
}

inline ScheduleConfig::Mode mode_from_string(const std::string& s) {
  if (s == "P" || s == "p") return ScheduleConfig::Mode::P;
  if (s == "B" || s == "b") return ScheduleConfig::Mode::B;
  throw ConfigError("unknown prediction mode '" + s + "' (want P|B)");
}

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j["policy"] = to_string(c.policy);
  j["K"] = c.K;
  j["min_k"] = c.min_k;
  j["threshold"] = c.threshold;
  j["first_key"] = c.first_key;
  j["mode"] = to_string(c.mode);
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  if (j.contains("policy")) c.policy = policy_from_string(j.at("policy").get<std::string>());
  c.K = j.value("K", c.K);
  c.min_k = j.value("min_k", c.min_k);
  c.threshold = j.value("threshold", c.threshold);
  c.first_key = j.value("first_key", c.first_key);
  if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
}

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j["videos"] = c.videos;
  j["frames_per_video"] = c.frames_per_video;
  j["height"] = c.height;
  j["width"] = c.width;
  j["classes"] = c.classes;
  j["shapes_per_video"] = c.shapes_per_video;
  j["max_speed"] = c.max_speed;
  j["noise_sigma"] = c.noise_sigma;
  j["label_mode"] = c.label_mode == GenConfig::LabelMode::dense ? "dense" : "sparse";
  j["seed"] = c.seed;
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  c.videos = j.value("videos", c.videos);
  c.frames_per_video = j.value("frames_per_video", c.frames_per_video);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.classes = j.value("classes", c.classes);
  c.shapes_per_video = j.value("shapes_per_video", c.shapes_per_video);
  c.max_speed = j.value("max_speed", c.max_speed);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  if (j.contains("label_mode")) {
    const std::string m = j.at("label_mode").get<std::string>();
    if (m == "dense")
      c.label_mode = GenConfig::LabelMode::dense;
    else if (m == "sparse")
      c.label_mode = GenConfig::LabelMode::sparse;
    else
      throw ConfigError("unknown label_mode '" + m + "' (want dense|sparse)");
  }
  c.seed = j.value("seed", c.seed);
}

}  // namespace dcfm
