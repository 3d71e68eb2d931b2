#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "noisynp/build_info.hpp"
#include "noisynp/checkpoint.hpp"
#include "noisynp/config.hpp"
#include "noisynp/eval.hpp"
#include "noisynp/train.hpp"

namespace noisynp {

namespace detail {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

// Advisory lock held for the lifetime of the object. flock serializes
// both across processes and across threads (separate descriptors).
class FileLock {
 public:
  explicit FileLock(const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file: " + path);
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock: " + path);
    }
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace detail

// Canonical identity of a training run: every field that changes the
// trained parameters. Evaluation settings, logging cadence and paths are
// deliberately excluded.
inline std::string run_key(const ExperimentConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("eval");
  j.erase("paths");
  j["train"].erase("log_every");
  j["train"].erase("checkpoint_every");
  return j.dump();
}

inline std::string run_name(const ExperimentConfig& cfg) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s-%s-setup%d-s%.4g-r%.4g-w%.4g-seed%llu",
                cfg.variant.c_str(), to_string(cfg.task.kernel.family).c_str(),
                cfg.setup, cfg.task.noise.std, cfg.task.noise.rate,
                cfg.loss.w_sigma,
                static_cast<unsigned long long>(cfg.train.seed));
  return std::string(buf) + "-" + detail::hex64(detail::fnv1a64(run_key(cfg)));
}

inline Trainer<float> make_trainer(const ExperimentConfig& cfg) {
  return Trainer<float>(ModelVariant::parse(cfg.variant), cfg.model, cfg.task,
                        setup_from_int(cfg.setup), cfg.loss, cfg.train);
}

// Trains (or resumes) the run described by cfg, caching the checkpoint
// under cache_dir. Concurrent callers on the same run serialize on a file
// lock; completed runs return immediately. Returns the checkpoint path.
inline std::string ensure_trained(
    const ExperimentConfig& cfg, const std::string& cache_dir,
    const std::function<void(const std::string&)>& progress = {}) {
  namespace fs = std::filesystem;
  const std::string name = run_name(cfg);
  const fs::path dir(cache_dir);
  fs::create_directories(dir);
  const std::string ckpt = (dir / (name + ".ckpt")).string();
  const long want_steps = cfg.train.effective_steps();

  detail::FileLock lock((dir / (name + ".lock")).string());

  if (fs::exists(ckpt)) {
    const auto ck = load_checkpoint<float>(ckpt);
    if (ck.global_step >= want_steps) return ckpt;
  }

  Trainer<float> trainer = make_trainer(cfg);
  if (fs::exists(ckpt)) {
    auto ck = load_checkpoint<float>(ckpt);
    trainer.params() = std::move(ck.params);
    trainer.optimizer().set_step_count(ck.opt_step);
    trainer.data_rng().deserialize(ck.data_rng_state);
    trainer.model_rng().deserialize(ck.model_rng_state);
    trainer.set_step(ck.global_step);
  }

  Json cfg_json = to_json(cfg);
  cfg_json["_code_hash"] = kCodeHash;
  const std::string cfg_dump = cfg_json.dump();
  {
    std::ofstream meta((dir / (name + ".config.json")).string());
    meta << cfg_dump << "\n";
  }

  const std::string log_path = (dir / (name + ".loss.csv")).string();
  std::ofstream log(log_path, std::ios::app);
  if (trainer.step() == 0) log << "step,recon_nll,kl,var_penalty,total\n";

  if (progress)
    progress("training " + name + " from step " +
             std::to_string(trainer.step()) + " to " +
             std::to_string(want_steps));

  trainer.run(
      [&](long step, const LossBreakdown& lb) {
        if (cfg.train.log_every > 0 && step % cfg.train.log_every == 0) {
          log << step << ',' << lb.recon_nll << ',' << lb.kl << ','
              << lb.var_penalty << ',' << lb.total << '\n';
        }
      },
      [&](long step) {
        save_checkpoint(ckpt, trainer.params(), step,
                        trainer.optimizer().step_count(),
                        trainer.data_rng(), trainer.model_rng(), cfg_dump);
      });
  if (want_steps == 0 || trainer.step() == 0) {
    save_checkpoint(ckpt, trainer.params(), trainer.step(),
                    trainer.optimizer().step_count(), trainer.data_rng(),
                    trainer.model_rng(), cfg_dump);
  }
  return ckpt;
}

// ---------------------------------------------------------------------
// Experiment grids
// ---------------------------------------------------------------------

struct ExperimentPlan {
  ExperimentConfig base;
  std::vector<std::string> variants;
  std::vector<NoiseSpec> noises;
  std::vector<std::uint64_t> seeds;
  // Robust variants look up their variance weight here (keyed by noise
  // std); absent entries fall back to base.loss.w_sigma.
  std::map<double, double> w_sigma_by_noise;
  long jobs = 1;
};

inline ExperimentConfig cell_config(const ExperimentPlan& plan,
                                    const std::string& variant,
                                    const NoiseSpec& noise,
                                    std::uint64_t seed) {
  ExperimentConfig cfg = plan.base;
  cfg.variant = variant;
  cfg.task.noise = noise;
  cfg.train.seed = seed;
  const ModelVariant v = ModelVariant::parse(variant);
  if (v.robust) {
    auto it = plan.w_sigma_by_noise.find(noise.std);
    if (it != plan.w_sigma_by_noise.end()) cfg.loss.w_sigma = it->second;
  } else {
    cfg.loss.w_sigma = 0.0;
    cfg.loss.include_context_in_recon = true;
  }
  return cfg;
}

// Shared fixtures: one evaluation set per noise spec, reused by every
// model so orderings are comparable. Fixture seeds derive from the noise.
inline std::vector<TaskBatch> noise_fixture(const ExperimentConfig& base,
                                            const NoiseSpec& noise) {
  TaskConfig tc = base.task;
  tc.noise = noise;
  EvalConfig ec = base.eval;
  ec.fixture_seed =
      base.eval.fixture_seed ^
      detail::fnv1a64("fixture|" + std::to_string(noise.std) + "|" +
                      std::to_string(noise.rate) + "|" +
                      to_string(tc.kernel.family));
  return build_eval_fixture(tc, setup_from_int(base.setup), ec);
}

// Key fields of the row a cell would produce, without running it.
inline EvalRow probe_row(const ExperimentConfig& cfg) {
  EvalRow row;
  row.dataset = cfg.dataset;
  row.kernel = to_string(cfg.task.kernel.family);
  row.model = cfg.variant;
  row.setup = cfg.setup;
  row.noise_s = cfg.task.noise.std;
  row.noise_r = cfg.task.noise.rate;
  row.seed = cfg.train.seed;
  row.k_eval = cfg.eval.k_eval;
  row.w_sigma = cfg.loss.w_sigma;
  return row;
}

inline EvalRow evaluate_cell(const ExperimentConfig& cfg,
                             const std::string& ckpt_path,
                             const std::vector<TaskBatch>& fixture) {
  auto ck = load_checkpoint<float>(ckpt_path);
  const ModelVariant v = ModelVariant::parse(cfg.variant);
  EvalRow row;
  row.dataset = cfg.dataset;
  row.kernel = to_string(cfg.task.kernel.family);
  row.model = cfg.variant;
  row.setup = cfg.setup;
  row.noise_s = cfg.task.noise.std;
  row.noise_r = cfg.task.noise.rate;
  row.seed = cfg.train.seed;
  row.k_eval = cfg.eval.k_eval;
  row.w_sigma = cfg.loss.w_sigma;
  long n_tasks = 0;
  for (const auto& b : fixture) n_tasks += b.batch;
  row.n_tasks = n_tasks;
  row.target_ll = evaluate_on_fixture(ck.params, v, cfg.model, fixture,
                                      cfg.eval.k_eval,
                                      cfg.eval.fixture_seed ^ 0xabcdef);
  return row;
}

namespace detail {

inline void run_parallel(long jobs, long n,
                         const std::function<void(long)>& fn) {
  if (jobs <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<long> next{0};
  std::vector<std::thread> pool;
  const long workers = std::min<long>(jobs, n);
  for (long w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const long i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// Trains and evaluates every (variant x noise x seed) cell; cells that
// already have a cached checkpoint only evaluate, and cells matching the
// skip predicate (e.g. rows already in a results index) are dropped
// entirely. Rows come back sorted so reruns produce identical files.
inline EvalResult run_experiment(
    const ExperimentPlan& plan, const std::string& cache_dir,
    const std::function<void(const std::string&)>& progress = {},
    const std::function<bool(const ExperimentConfig&)>& skip = {}) {
  struct Cell {
    ExperimentConfig cfg;
    long fixture_id;
  };
  std::vector<Cell> cells;
  std::vector<std::vector<TaskBatch>> fixtures;
  for (std::size_t ni = 0; ni < plan.noises.size(); ++ni) {
    bool fixture_used = false;
    for (const auto& variant : plan.variants) {
      for (auto seed : plan.seeds) {
        ExperimentConfig cfg = cell_config(plan, variant, plan.noises[ni], seed);
        if (skip && skip(cfg)) continue;
        if (!fixture_used) {
          fixtures.push_back(noise_fixture(plan.base, plan.noises[ni]));
          fixture_used = true;
        }
        cells.push_back({cfg, static_cast<long>(fixtures.size()) - 1});
      }
    }
  }

  EvalResult result;
  result.rows.resize(cells.size());
  std::mutex progress_mu;
  detail::run_parallel(plan.jobs, static_cast<long>(cells.size()), [&](long i) {
    const auto& cell = cells[static_cast<std::size_t>(i)];
    const std::string ckpt = ensure_trained(cell.cfg, cache_dir, [&](const std::string& msg) {
      if (progress) {
        std::lock_guard<std::mutex> g(progress_mu);
        progress(msg);
      }
    });
    result.rows[static_cast<std::size_t>(i)] = evaluate_cell(
        cell.cfg, ckpt, fixtures[static_cast<std::size_t>(cell.fixture_id)]);
    if (progress) {
      std::lock_guard<std::mutex> g(progress_mu);
      progress("evaluated " + run_name(cell.cfg) + " -> " +
               std::to_string(result.rows[static_cast<std::size_t>(i)].target_ll));
    }
  });

  std::sort(result.rows.begin(), result.rows.end(),
            [](const EvalRow& a, const EvalRow& b) {
              return std::tie(a.model, a.noise_s, a.noise_r, a.seed) <
                     std::tie(b.model, b.noise_s, b.noise_r, b.seed);
            });
  return result;
}

// Decoupled noise grid: a full s x r sweep (setup-3 protocol) per variant.
inline EvalResult sweep_noise_axes(
    ExperimentPlan plan, const std::vector<double>& s_grid,
    const std::vector<double>& r_grid, const std::string& cache_dir,
    const std::function<void(const std::string&)>& progress = {}) {
  plan.noises.clear();
  for (double s : s_grid)
    for (double r : r_grid) plan.noises.push_back(NoiseSpec::decoupled(s, r));
  return run_experiment(plan, cache_dir, progress);
}

struct TuneResult {
  double best_w = 0.0;
  EvalResult table;  // one row per candidate weight (validation scores)
};

// Trains one robust model per candidate weight and picks the argmax of
// the validation target log-likelihood (ties prefer smaller |w|).
// Validation tasks come from a fixture seed offset, disjoint from the
// test fixtures used by run_experiment.
inline TuneResult tune_variance_weight(
    const ExperimentConfig& base, const NoiseSpec& noise,
    const std::vector<double>& grid, const std::string& cache_dir, long jobs = 1,
    const std::function<void(const std::string&)>& progress = {}) {
  if (grid.empty()) throw ConfigError("tune_variance_weight: empty grid");

  ExperimentConfig val_base = base;
  val_base.eval.fixture_seed ^= 0x76616c6964ull;  // validation stream
  val_base.eval.n_tasks = std::max<long>(1, base.eval.n_tasks / 3);
  const std::vector<TaskBatch> val_fixture = noise_fixture(val_base, noise);

  TuneResult out;
  out.table.rows.resize(grid.size());
  detail::run_parallel(jobs, static_cast<long>(grid.size()), [&](long i) {
    ExperimentConfig cfg = base;
    cfg.task.noise = noise;
    cfg.loss.w_sigma = grid[static_cast<std::size_t>(i)];
    const std::string ckpt = ensure_trained(cfg, cache_dir, progress);
    EvalRow row = evaluate_cell(cfg, ckpt, val_fixture);
    out.table.rows[static_cast<std::size_t>(i)] = row;
  });

  double best_ll = -std::numeric_limits<double>::infinity();
  for (const auto& row : out.table.rows) {
    const bool better =
        row.target_ll > best_ll ||
        (row.target_ll == best_ll && std::abs(row.w_sigma) < std::abs(out.best_w));
    if (better) {
      best_ll = row.target_ll;
      out.best_w = row.w_sigma;
    }
  }
  return out;
}

// Ablation protocol: full robust model vs. no-variance-term (w = 0) vs.
// reconstruction-on-all-points, over a noise grid. Row model names carry
// the ablation suffixes.
inline EvalResult ablation_suite(
    const ExperimentConfig& base, const std::vector<double>& noise_levels,
    const std::map<double, double>& tuned_w, const std::string& cache_dir,
    long jobs = 1, const std::function<void(const std::string&)>& progress = {},
    const std::vector<std::uint64_t>& seeds = {0}) {
  if (!ModelVariant::parse(base.variant).robust)
    throw ConfigError("ablation_suite requires a robust variant");

  struct Arm {
    std::string label;
    bool include_ctx;
    bool zero_w;
  };
  const std::vector<Arm> arms = {{base.variant, false, false},
                                 {base.variant + "-no-sig", false, true},
                                 {base.variant + "-all-pts", true, false}};

  struct Cell {
    ExperimentConfig cfg;
    std::string label;
    long fixture_id;
  };
  std::vector<Cell> cells;
  std::vector<std::vector<TaskBatch>> fixtures;
  for (std::size_t ni = 0; ni < noise_levels.size(); ++ni) {
    const NoiseSpec noise = NoiseSpec::level(noise_levels[ni]);
    fixtures.push_back(noise_fixture(base, noise));
    for (const auto& arm : arms) {
      for (auto seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.task.noise = noise;
        cfg.train.seed = seed;
        cfg.loss.include_context_in_recon = arm.include_ctx;
        auto it = tuned_w.find(noise.std);
        cfg.loss.w_sigma =
            arm.zero_w ? 0.0
                       : (it != tuned_w.end() ? it->second : base.loss.w_sigma);
        cells.push_back({cfg, arm.label, static_cast<long>(ni)});
      }
    }
  }

  EvalResult result;
  result.rows.resize(cells.size());
  detail::run_parallel(jobs, static_cast<long>(cells.size()), [&](long i) {
    const auto& cell = cells[static_cast<std::size_t>(i)];
    const std::string ckpt = ensure_trained(cell.cfg, cache_dir, progress);
    EvalRow row = evaluate_cell(
        cell.cfg, ckpt, fixtures[static_cast<std::size_t>(cell.fixture_id)]);
    row.model = cell.label;
    result.rows[static_cast<std::size_t>(i)] = row;
  });
  std::sort(result.rows.begin(), result.rows.end(),
            [](const EvalRow& a, const EvalRow& b) {
              return std::tie(a.model, a.noise_s, a.seed) <
                     std::tie(b.model, b.noise_s, b.seed);
            });
  return result;
}

// ---------------------------------------------------------------------
// Results persistence: append-only CSV plus a JSON index of completed
// cell keys (for restartable sweeps), both under a file lock.
// ---------------------------------------------------------------------

inline constexpr const char* kResultsHeader =
    "dataset,kernel,model,setup,noise_s,noise_r,seed,target_ll,n_tasks,k_eval,"
    "w_sigma";

inline std::string row_cell_key(const EvalRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s|%s|%s|%d|%.6g|%.6g|%llu|%ld|%.6g",
                r.dataset.c_str(), r.kernel.c_str(), r.model.c_str(), r.setup,
                r.noise_s, r.noise_r, static_cast<unsigned long long>(r.seed),
                r.k_eval, r.w_sigma);
  return buf;
}

inline std::string results_csv_line(const EvalRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%d,%.6g,%.6g,%llu,%.10g,%ld,%ld,%.6g",
                r.dataset.c_str(), r.kernel.c_str(), r.model.c_str(), r.setup,
                r.noise_s, r.noise_r, static_cast<unsigned long long>(r.seed),
                r.target_ll, r.n_tasks, r.k_eval, r.w_sigma);
  return buf;
}

class ResultsStore {
 public:
  explicit ResultsStore(const std::string& dir) : dir_(dir) {
    std::filesystem::create_directories(dir_);
  }

  std::string csv_path() const { return (dir_ / "results.csv").string(); }
  std::string index_path() const { return (dir_ / "results.index.json").string(); }

  bool has(const EvalRow& probe) const {
    detail::FileLock lock(lock_path());
    const Json idx = load_index();
    return idx.contains(row_cell_key(probe));
  }

  // Appends rows that are not in the index yet; returns how many were new.
  long append(const std::vector<EvalRow>& rows,
              const std::string& config_echo = "{}") {
    detail::FileLock lock(lock_path());
    Json idx = load_index();
    const bool fresh = !std::filesystem::exists(csv_path());
    std::ofstream csv(csv_path(), std::ios::app);
    if (fresh) csv << kResultsHeader << "\n";
    long added = 0;
    for (const auto& r : rows) {
      const std::string key = row_cell_key(r);
      if (idx.contains(key)) continue;
      csv << results_csv_line(r) << "\n";
      idx[key] = r.target_ll;
      ++added;
    }
    csv.flush();
    save_index(idx);
    Json meta;
    meta["code_hash"] = kCodeHash;
    meta["config"] = Json::parse(config_echo);
    std::ofstream m((dir_ / "results.meta.json").string());
    m << meta.dump(2) << "\n";
    return added;
  }

  std::vector<EvalRow> load_rows() const {
    std::vector<EvalRow> rows;
    std::ifstream csv(csv_path());
    if (!csv) return rows;
    std::string line;
    std::getline(csv, line);  // header
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      EvalRow r;
      char dataset[64] = {0}, kernel[64] = {0}, model[64] = {0};
      unsigned long long seed = 0;
      if (std::sscanf(line.c_str(),
                      "%63[^,],%63[^,],%63[^,],%d,%lg,%lg,%llu,%lg,%ld,%ld,%lg",
                      dataset, kernel, model, &r.setup, &r.noise_s, &r.noise_r,
                      &seed, &r.target_ll, &r.n_tasks, &r.k_eval,
                      &r.w_sigma) >= 10) {
        r.dataset = dataset;
        r.kernel = kernel;
        r.model = model;
        r.seed = seed;
        rows.push_back(r);
      }
    }
    return rows;
  }

  // "value +- std" aggregate mirroring the result tables.
  void write_aggregate_json(const EvalResult& result) const {
    Json j = Json::array();
    for (const auto& a : result.aggregate()) {
      Json e;
      e["key"] = a.key;
      e["mean"] = a.mean;
      e["count"] = a.count;
      if (a.count >= 2) e["std"] = a.std;
      char pm[96];
      if (a.count >= 2)
        std::snprintf(pm, sizeof(pm), "%.5g +- %.5g", a.mean, a.std);
      else
        std::snprintf(pm, sizeof(pm), "%.5g", a.mean);
      e["value"] = pm;
      j.push_back(e);
    }
    std::ofstream os((dir_ / "aggregate.json").string());
    os << j.dump(2) << "\n";
  }

 private:
  std::filesystem::path dir_;

  std::string lock_path() const { return (dir_ / ".results.lock").string(); }

  Json load_index() const {
    std::ifstream is(index_path());
    if (!is) return Json::object();
    try {
      return Json::parse(is);
    } catch (...) {
      return Json::object();
    }
  }

  void save_index(const Json& idx) const {
    const std::string tmp = index_path() + ".tmp";
    {
      std::ofstream os(tmp);
      os << idx.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, index_path());
  }
};

}  // namespace noisynp
