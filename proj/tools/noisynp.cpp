// Experiment orchestration: train / eval / sweep / render / export-plots.
// Exit codes: 0 success, 2 config error, 3 numeric error, 4 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "noisynp/build_info.hpp"
#include "noisynp/config.hpp"
#include "noisynp/experiment.hpp"
#include "noisynp/imagefunc.hpp"
#include "noisynp/plots.hpp"

using namespace noisynp;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  long seed = -1;
  std::string out_dir;
};

ExperimentConfig load_config(const CommonOpts& opts) {
  std::vector<std::string> ov = opts.overrides;
  if (opts.seed >= 0)
    ov.push_back("train.seed=" + std::to_string(opts.seed));
  ExperimentConfig cfg = load_experiment_config(opts.config_path, ov);
  if (!opts.out_dir.empty()) {
    cfg.checkpoint_dir = opts.out_dir;
    cfg.results_dir = opts.out_dir;
  }
  return cfg;
}

void write_resolved_config(const ExperimentConfig& cfg, const std::string& dir) {
  std::filesystem::create_directories(dir);
  Json j = to_json(cfg);
  j["_code_hash"] = kCodeHash;
  std::ofstream os(std::filesystem::path(dir) / "resolved_config.json");
  os << j.dump(2) << "\n";
}

int cmd_train(const CommonOpts& opts) {
  ExperimentConfig cfg = load_config(opts);
  const std::string cache = resolve_path(cfg.checkpoint_dir);
  write_resolved_config(cfg, cache);
  const std::string ckpt = ensure_trained(
      cfg, cache, [](const std::string& msg) { std::cout << msg << "\n"; });
  std::cout << "checkpoint: " << ckpt << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const CommonOpts& opts) {
  auto ck = load_checkpoint<float>(ckpt_path);
  ExperimentConfig cfg = parse_experiment_config([&] {
    Json j = Json::parse(ck.config_json);
    j.erase("_code_hash");
    return j;
  }());
  if (!opts.config_path.empty()) {
    ExperimentConfig requested = load_config(opts);
    if (requested.variant != cfg.variant)
      throw ConfigError("checkpoint variant " + cfg.variant +
                        " does not match config variant " + requested.variant);
    cfg.eval = requested.eval;
    cfg.results_dir = requested.results_dir;
  }
  for (const auto& o : opts.overrides) {
    Json j = to_json(cfg);
    apply_override(j, o);
    cfg = parse_experiment_config(j);
  }

  const auto fixture = noise_fixture(cfg, cfg.task.noise);
  EvalRow row = evaluate_cell(cfg, ckpt_path, fixture);
  EvalResult result;
  result.rows.push_back(row);

  ResultsStore store(resolve_path(cfg.results_dir));
  store.append(result.rows, to_json(cfg).dump());
  store.write_aggregate_json(result);
  for (const auto& agg : result.aggregate()) {
    if (agg.count >= 2)
      std::printf("%s: %.5g +- %.5g (n=%ld)\n", agg.key.c_str(), agg.mean,
                  agg.std, agg.count);
    else
      std::printf("%s: %.5g\n", agg.key.c_str(), agg.mean);
  }
  return 0;
}

// Sweep spec: the experiment config plus a "sweep" section naming the
// grid. Completed cells are skipped through the results index.
int cmd_sweep(const CommonOpts& opts, long jobs) {
  std::ifstream is(opts.config_path);
  if (!is) throw IoError("cannot open config: " + opts.config_path);
  Json j;
  try {
    j = Json::parse(is);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& o : opts.overrides) apply_override(j, o);

  Json sweep = j.value("sweep", Json::object());
  j.erase("sweep");
  detail::check_keys(sweep,
                     {"mode", "variants", "noise_levels", "seeds", "s_grid",
                      "r_grid", "w_sigma_grid", "w_sigma_by_noise"},
                     "sweep");

  ExperimentPlan plan;
  plan.base = parse_experiment_config(j);
  if (!opts.out_dir.empty()) {
    plan.base.checkpoint_dir = opts.out_dir;
    plan.base.results_dir = opts.out_dir;
  }
  plan.jobs = jobs;
  plan.variants = sweep.value("variants", std::vector<std::string>{plan.base.variant});
  for (double s : sweep.value("noise_levels", std::vector<double>{plan.base.task.noise.std}))
    plan.noises.push_back(NoiseSpec::level(s));
  plan.seeds = sweep.value("seeds", std::vector<std::uint64_t>{plan.base.train.seed});
  if (sweep.contains("w_sigma_by_noise"))
    for (auto& [k, v] : sweep.at("w_sigma_by_noise").items())
      plan.w_sigma_by_noise[std::stod(k)] = v.get<double>();

  const std::string cache = resolve_path(plan.base.checkpoint_dir);
  ResultsStore store(resolve_path(plan.base.results_dir));
  write_resolved_config(plan.base, resolve_path(plan.base.results_dir));
  auto progress = [](const std::string& msg) { std::cout << msg << "\n" << std::flush; };
  auto skip = [&](const ExperimentConfig& cfg) { return store.has(probe_row(cfg)); };

  const std::string mode = sweep.value("mode", std::string("levels"));
  EvalResult result;
  if (mode == "levels") {
    result = run_experiment(plan, cache, progress, skip);
  } else if (mode == "sr-grid") {
    const auto s_grid = sweep.value("s_grid", std::vector<double>{});
    const auto r_grid = sweep.value("r_grid", std::vector<double>{});
    if (s_grid.empty() || r_grid.empty())
      throw ConfigError("sr-grid sweep needs s_grid and r_grid");
    plan.noises.clear();
    for (double s : s_grid)
      for (double r : r_grid) plan.noises.push_back(NoiseSpec::decoupled(s, r));
    result = run_experiment(plan, cache, progress, skip);
  } else if (mode == "tune") {
    const auto grid = sweep.value("w_sigma_grid", std::vector<double>{});
    if (grid.empty()) throw ConfigError("tune sweep needs w_sigma_grid");
    for (const auto& noise : plan.noises) {
      ExperimentConfig base = plan.base;
      TuneResult tr = tune_variance_weight(base, noise, grid, cache, jobs, progress);
      std::printf("noise %.4g: best w_sigma = %.4g\n", noise.std, tr.best_w);
      for (const auto& r : tr.table.rows) result.rows.push_back(r);
    }
  } else if (mode == "ablation") {
    std::map<double, double> tuned = plan.w_sigma_by_noise;
    std::vector<double> levels;
    for (const auto& n : plan.noises) levels.push_back(n.std);
    result = ablation_suite(plan.base, levels, tuned, cache, jobs, progress,
                            plan.seeds);
  } else {
    throw ConfigError("unknown sweep mode: " + mode);
  }

  const long added = store.append(result.rows, to_json(plan.base).dump());
  store.write_aggregate_json(EvalResult{store.load_rows()});
  std::printf("sweep complete: %ld new rows -> %s\n", added,
              store.csv_path().c_str());
  return 0;
}

int cmd_render(const std::string& ckpt_path, const std::string& images_dir,
               long n_ctx, double noise_level, long k, std::uint64_t seed,
               const std::string& out_dir) {
  auto ck = load_checkpoint<float>(ckpt_path);
  Json cfg_json = Json::parse(ck.config_json);
  cfg_json.erase("_code_hash");
  const ExperimentConfig cfg = parse_experiment_config(cfg_json);
  const ModelVariant v = ModelVariant::parse(cfg.variant);
  if (cfg.model.x_dim != 2)
    throw ConfigError("render needs an image-trained checkpoint (x_dim == 2)");

  const ImageFunctionSet set = load_image_set(images_dir);
  Rng rng(seed);
  std::vector<long> ids;
  const NoiseSpec noise = NoiseSpec::level(noise_level);
  TaskBatch task = sample_image_task(set, n_ctx, set.n_pixels() - n_ctx, noise,
                                     setup_from_int(cfg.setup), Phase::eval,
                                     rng, 1, &ids);
  RenderResult render =
      render_prediction(ck.params, v, cfg.model, set, task, k, rng);

  std::filesystem::create_directories(out_dir);
  const ImageU8 clean = set.images[static_cast<std::size_t>(ids[0])];
  const ImageU8 ctx = context_image(set, task);
  const ImageU8 strip = compose_strip({clean, ctx, render.image});
  const std::string strip_path =
      (std::filesystem::path(out_dir) / "render_strip.png").string();
  write_png(strip_path, strip);

  Json side;
  side["seed"] = seed;
  side["noise_level"] = noise_level;
  side["context_size"] = n_ctx;
  side["model"] = cfg.variant;
  side["image_id"] = ids[0];
  side["k"] = k;
  side["code_hash"] = kCodeHash;
  std::ofstream os(std::filesystem::path(out_dir) / "render_strip.json");
  os << side.dump(2) << "\n";
  std::cout << "render: " << strip_path << "\n";
  return 0;
}

int cmd_export_plots(const std::string& results_dir, const std::string& figure,
                     const std::string& out_dir) {
  ResultsStore store(resolve_path(results_dir));
  const auto rows = store.load_rows();
  if (rows.empty()) throw IoError("no results found in " + results_dir);
  const std::string out =
      out_dir.empty() ? (std::filesystem::path(resolve_path(results_dir)) /
                         ("plots-" + figure))
                            .string()
                      : out_dir;
  const auto written = export_plots(rows, figure, out);
  for (const auto& p : written) std::cout << p << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-process toolkit for modeling functions from noisy observations"};
  app.require_subcommand(1);

  CommonOpts opts;
  long jobs = 1;

  auto add_common = [&](CLI::App* cmd, bool config_required) {
    cmd->add_option("--config", opts.config_path, "experiment config (JSON)")
        ->required(config_required);
    cmd->add_option("--set", opts.overrides,
                    "dotted config override, e.g. train.lr=1e-3");
    cmd->add_option("--seed", opts.seed, "training seed override");
    cmd->add_option("--out", opts.out_dir, "output directory override");
  };

  auto* train = app.add_subcommand("train", "train one model to a checkpoint");
  add_common(train, true);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path;
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  add_common(eval, false);

  auto* sweep = app.add_subcommand("sweep", "run an experiment grid");
  add_common(sweep, true);
  sweep->add_option("--jobs", jobs, "parallel worker count");
  bool resume = true;
  sweep->add_flag("--resume,!--no-resume", resume,
                  "skip cells already in the results index (default)");

  auto* render = app.add_subcommand("render", "render image predictions");
  std::string images_dir, render_out = "renders";
  long n_ctx = 100, k_render = 30;
  double render_noise = 0.6;
  std::uint64_t render_seed = 0;
  render->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  render->add_option("--images", images_dir, "directory of PNG images")->required();
  render->add_option("--n-ctx", n_ctx, "context pixel count");
  render->add_option("--noise", render_noise, "noise level");
  render->add_option("--k", k_render, "latent samples to average");
  render->add_option("--seed", render_seed, "task seed");
  render->add_option("--out", render_out, "output directory");

  auto* exportp = app.add_subcommand("export-plots", "emit plot series files");
  std::string results_dir, figure = "noise-curves", plots_out;
  exportp->add_option("--results", results_dir, "results directory")->required();
  exportp->add_option("--figure", figure,
                      "figure id: noise-curves | np-delta | sr-grid");
  exportp->add_option("--out", plots_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(opts);
    if (eval->parsed()) return cmd_eval(ckpt_path, opts);
    if (sweep->parsed()) return cmd_sweep(opts, jobs);
    if (render->parsed())
      return cmd_render(ckpt_path, images_dir, n_ctx, render_noise, k_render,
                        render_seed, render_out);
    if (exportp->parsed()) return cmd_export_plots(results_dir, figure, plots_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
