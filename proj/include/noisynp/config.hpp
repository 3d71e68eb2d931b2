#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "noisynp/eval.hpp"
#include "noisynp/models.hpp"
#include "noisynp/train.hpp"

namespace noisynp {

using Json = nlohmann::json;

// Full experiment description. Every run serializes its resolved config
// next to its outputs; parsing is strict (unknown keys are errors).
struct ExperimentConfig {
  std::string dataset = "gp";  // "gp" | "image"
  std::string image_dir;       // image dataset directory (dataset == "image")
  TaskConfig task;
  int setup = 3;
  std::string variant = "anp";
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  EvalConfig eval;
  std::string checkpoint_dir = "runs";
  std::string results_dir = "results";

  void validate() const {
    task.validate();
    model.validate();
    train.validate();
    loss.validate();
    eval.validate();
    (void)setup_from_int(setup);
    (void)ModelVariant::parse(variant);
    if (dataset != "gp" && dataset != "image")
      throw ConfigError("dataset must be 'gp' or 'image'");
  }
};

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& known,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key()))
      throw ConfigError("unknown config key: " + where + "." + it.key());
  }
}

template <class T>
void maybe(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_range(const Json& j, const char* key, double& lo,
                        double& hi) {
  if (!j.contains(key)) return;
  const auto& r = j.at(key);
  if (!r.is_array() || r.size() != 2)
    throw ConfigError(std::string("range ") + key + " must be [lo, hi]");
  lo = r.at(0).get<double>();
  hi = r.at(1).get<double>();
}

}  // namespace detail

inline void from_json_strict(const Json& j, NoiseSpec& n) {
  detail::check_keys(j, {"level", "std", "rate", "coupled"}, "data.noise");
  if (j.contains("level")) {
    n = NoiseSpec::level(j.at("level").get<double>());
    if (j.contains("std") || j.contains("rate"))
      throw ConfigError("noise: give either level or std/rate, not both");
    detail::maybe(j, "coupled", n.coupled);
  } else {
    n.coupled = false;
    detail::maybe(j, "std", n.std);
    detail::maybe(j, "rate", n.rate);
    detail::maybe(j, "coupled", n.coupled);
    if (n.coupled) n.rate = n.std;
  }
  n.validate();
}

inline void from_json_strict(const Json& j, TaskConfig& t) {
  detail::check_keys(j,
                     {"kernel", "length_scale", "output_scale", "period",
                      "x_range", "n_ctx", "n_tar_lo", "max_points", "noise",
                      "batch"},
                     "data");
  if (j.contains("kernel"))
    t.kernel.family = kernel_family_from_string(j.at("kernel").get<std::string>());
  detail::parse_range(j, "length_scale", t.kernel.length_scale_lo,
                      t.kernel.length_scale_hi);
  detail::parse_range(j, "output_scale", t.kernel.output_scale_lo,
                      t.kernel.output_scale_hi);
  detail::parse_range(j, "period", t.kernel.period_lo, t.kernel.period_hi);
  detail::parse_range(j, "x_range", t.x_lo, t.x_hi);
  if (j.contains("n_ctx")) {
    const auto& r = j.at("n_ctx");
    t.n_ctx_lo = r.at(0).get<long>();
    t.n_ctx_hi = r.at(1).get<long>();
  }
  detail::maybe(j, "n_tar_lo", t.n_tar_lo);
  detail::maybe(j, "max_points", t.max_points);
  detail::maybe(j, "batch", t.batch);
  if (j.contains("noise")) from_json_strict(j.at("noise"), t.noise);
}

inline void from_json_strict(const Json& j, ModelConfig& m) {
  detail::check_keys(j,
                     {"hidden_dim", "z_dim", "depth_enc", "depth_dec",
                      "n_heads", "activation", "sigma_floor", "x_dim", "y_dim",
                      "train_bootstrap", "eval_bootstrap"},
                     "model");
  detail::maybe(j, "hidden_dim", m.backbone.hidden_dim);
  detail::maybe(j, "z_dim", m.z_dim);
  detail::maybe(j, "depth_enc", m.backbone.depth_enc);
  detail::maybe(j, "depth_dec", m.backbone.depth_dec);
  detail::maybe(j, "n_heads", m.backbone.n_heads);
  if (j.contains("activation"))
    m.backbone.activation =
        activation_from_string(j.at("activation").get<std::string>());
  detail::maybe(j, "sigma_floor", m.backbone.sigma_floor);
  detail::maybe(j, "x_dim", m.x_dim);
  detail::maybe(j, "y_dim", m.y_dim);
  detail::maybe(j, "train_bootstrap", m.train_bootstrap);
  detail::maybe(j, "eval_bootstrap", m.eval_bootstrap);
}

inline void from_json_strict(const Json& j, TrainConfig& t) {
  detail::check_keys(j,
                     {"steps", "lr", "lr_schedule", "seed", "log_every",
                      "checkpoint_every", "scale"},
                     "train");
  detail::maybe(j, "steps", t.steps);
  detail::maybe(j, "lr", t.lr);
  detail::maybe(j, "lr_schedule", t.lr_schedule);
  detail::maybe(j, "seed", t.seed);
  detail::maybe(j, "log_every", t.log_every);
  detail::maybe(j, "checkpoint_every", t.checkpoint_every);
  detail::maybe(j, "scale", t.scale);
}

inline void from_json_strict(const Json& j, LossConfig& l) {
  detail::check_keys(j, {"include_context_in_recon", "w_sigma", "k_train"},
                     "loss");
  detail::maybe(j, "include_context_in_recon", l.include_context_in_recon);
  detail::maybe(j, "w_sigma", l.w_sigma);
  detail::maybe(j, "k_train", l.k_train);
}

inline void from_json_strict(const Json& j, EvalConfig& e) {
  detail::check_keys(j, {"k_eval", "eval_batch", "n_tasks", "fixture_seed"},
                     "eval");
  detail::maybe(j, "k_eval", e.k_eval);
  detail::maybe(j, "eval_batch", e.eval_batch);
  detail::maybe(j, "n_tasks", e.n_tasks);
  detail::maybe(j, "fixture_seed", e.fixture_seed);
}

inline ExperimentConfig parse_experiment_config(const Json& j) {
  detail::check_keys(j,
                     {"dataset", "image_dir", "data", "setup", "model_variant",
                      "model", "train", "loss", "eval", "paths"},
                     "config");
  ExperimentConfig cfg;
  detail::maybe(j, "dataset", cfg.dataset);
  detail::maybe(j, "image_dir", cfg.image_dir);
  if (j.contains("data")) from_json_strict(j.at("data"), cfg.task);
  detail::maybe(j, "setup", cfg.setup);
  detail::maybe(j, "model_variant", cfg.variant);
  if (j.contains("model")) from_json_strict(j.at("model"), cfg.model);
  if (j.contains("train")) from_json_strict(j.at("train"), cfg.train);
  if (j.contains("loss")) from_json_strict(j.at("loss"), cfg.loss);
  if (j.contains("eval")) from_json_strict(j.at("eval"), cfg.eval);
  if (j.contains("paths")) {
    detail::check_keys(j.at("paths"), {"checkpoint_dir", "results_dir"},
                       "paths");
    detail::maybe(j.at("paths"), "checkpoint_dir", cfg.checkpoint_dir);
    detail::maybe(j.at("paths"), "results_dir", cfg.results_dir);
  }
  cfg.validate();
  return cfg;
}

inline Json to_json(const ExperimentConfig& cfg) {
  Json j;
  j["dataset"] = cfg.dataset;
  if (!cfg.image_dir.empty()) j["image_dir"] = cfg.image_dir;
  j["data"] = {
      {"kernel", to_string(cfg.task.kernel.family)},
      {"length_scale",
       {cfg.task.kernel.length_scale_lo, cfg.task.kernel.length_scale_hi}},
      {"output_scale",
       {cfg.task.kernel.output_scale_lo, cfg.task.kernel.output_scale_hi}},
      {"period", {cfg.task.kernel.period_lo, cfg.task.kernel.period_hi}},
      {"x_range", {cfg.task.x_lo, cfg.task.x_hi}},
      {"n_ctx", {cfg.task.n_ctx_lo, cfg.task.n_ctx_hi}},
      {"n_tar_lo", cfg.task.n_tar_lo},
      {"max_points", cfg.task.max_points},
      {"batch", cfg.task.batch},
      {"noise",
       {{"std", cfg.task.noise.std},
        {"rate", cfg.task.noise.rate},
        {"coupled", cfg.task.noise.coupled}}},
  };
  j["setup"] = cfg.setup;
  j["model_variant"] = cfg.variant;
  j["model"] = {
      {"hidden_dim", cfg.model.backbone.hidden_dim},
      {"z_dim", cfg.model.z_dim},
      {"depth_enc", cfg.model.backbone.depth_enc},
      {"depth_dec", cfg.model.backbone.depth_dec},
      {"n_heads", cfg.model.backbone.n_heads},
      {"activation", to_string(cfg.model.backbone.activation)},
      {"sigma_floor", cfg.model.backbone.sigma_floor},
      {"x_dim", cfg.model.x_dim},
      {"y_dim", cfg.model.y_dim},
      {"train_bootstrap", cfg.model.train_bootstrap},
      {"eval_bootstrap", cfg.model.eval_bootstrap},
  };
  j["train"] = {
      {"steps", cfg.train.steps},
      {"lr", cfg.train.lr},
      {"lr_schedule", cfg.train.lr_schedule},
      {"seed", cfg.train.seed},
      {"log_every", cfg.train.log_every},
      {"checkpoint_every", cfg.train.checkpoint_every},
      {"scale", cfg.train.scale},
  };
  j["loss"] = {
      {"include_context_in_recon", cfg.loss.include_context_in_recon},
      {"w_sigma", cfg.loss.w_sigma},
      {"k_train", cfg.loss.k_train},
  };
  j["eval"] = {
      {"k_eval", cfg.eval.k_eval},
      {"eval_batch", cfg.eval.eval_batch},
      {"n_tasks", cfg.eval.n_tasks},
      {"fixture_seed", cfg.eval.fixture_seed},
  };
  j["paths"] = {
      {"checkpoint_dir", cfg.checkpoint_dir},
      {"results_dir", cfg.results_dir},
  };
  return j;
}

// Dotted-path override, e.g. "train.lr=0.001" or "data.noise.level=0.6".
// The value text is parsed as JSON when possible, else taken as a string.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (...) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("bad override path: " + path);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline ExperimentConfig load_experiment_config(
    const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  Json j;
  try {
    j = Json::parse(is);
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_experiment_config(j);
}

// Data/output root: relative paths in the config resolve under this.
inline std::string output_root() {
  const char* env = std::getenv("NOISYNP_ROOT");
  return env ? std::string(env) : std::string(".");
}

inline std::string resolve_path(const std::string& p) {
  std::filesystem::path pp(p);
  if (pp.is_absolute()) return p;
  return (std::filesystem::path(output_root()) / pp).string();
}

}  // namespace noisynp
