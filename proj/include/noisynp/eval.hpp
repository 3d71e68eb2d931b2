#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "noisynp/models.hpp"
#include "noisynp/tasks.hpp"

namespace noisynp {

struct EvalConfig {
  long k_eval = 50;        // latent samples / bootstrap members per task
  long eval_batch = 160;   // tasks per evaluation batch
  long n_tasks = 3000;     // tasks per fixture
  std::uint64_t fixture_seed = 9000;

  void validate() const {
    if (k_eval < 1) throw ConfigError("k_eval must be >= 1");
    if (eval_batch < 1 || n_tasks < 1)
      throw ConfigError("eval batch and task count must be >= 1");
  }
};

namespace detail {

inline double logsumexp(const Vecd& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

// Per-element log N(y; mu, sigma) in double, summed over y dims -> [rows].
inline Vecd pointwise_ll(const Matd& y, const Matd& mu, const Matd& sigma) {
  const auto diff = (y - mu).array();
  return (-0.5 * kLog2Pi - sigma.array().log() -
          diff.square() / (2.0 * sigma.array().square()))
      .rowwise()
      .sum();
}

// Diagonal-Gaussian log-density of z rows under (mu, sigma) rows -> [B].
inline Vecd rowwise_gaussian_ll(const Matd& z, const Matd& mu,
                                const Matd& sigma) {
  const auto diff = (z - mu).array();
  return (-0.5 * kLog2Pi - sigma.array().log() -
          diff.square() / (2.0 * sigma.array().square()))
      .rowwise()
      .sum();
}

}  // namespace detail

// Importance-sampled per-point target log-likelihood, batch-averaged.
//
// Latent variants: K samples z_k ~ q(z | noisy context + clean targets),
// per task (logsumexp_k [sum_t log p(y_t|z_k) + log p(z_k) - log q(z_k)]
// - ln K) / n_tar. Deterministic variants ignore K. Bootstrap variants are
// scored as an equal-weight mixture: per-point logsumexp over the base and
// K resampled members, minus ln(members).
//
// The likelihood consumes clean_tar_y only; noisy target values never
// enter the estimate.
template <class S>
double target_log_likelihood(ParamStore<S>& params, ModelVariant v,
                             const ModelConfig& cfg, const TaskBatch& task,
                             long K, Rng& rng) {
  if (K < 1) throw ConfigError("target_log_likelihood: K must be >= 1");
  if (task.clean_tar_y.rows() != task.tar_rows())
    throw ConfigError("target_log_likelihood: missing clean targets");
  const long B = task.batch, n_tar = task.n_tar;

  Tape<S> tape(/*recording=*/false);
  BoundParams<S> bound(tape, params);

  if (v.bootstrapped()) {
    ModelConfig mcfg = cfg;
    mcfg.eval_bootstrap = K;
    ModelOutput<S> out = forward(bound, v, mcfg, task, /*K=*/1, rng,
                                 Phase::eval, /*include_ctx_in_query=*/false);
    const long M = static_cast<long>(out.predictions.size());
    Matd ll(B * n_tar, M);
    for (long m = 0; m < M; ++m) {
      const Matd mu = tape.val(out.predictions[m].mean).template cast<double>();
      const Matd sd = tape.val(out.predictions[m].std).template cast<double>();
      ll.col(m) = detail::pointwise_ll(task.clean_tar_y, mu, sd);
    }
    double acc = 0.0;
    const double log_m = std::log(static_cast<double>(M));
    for (long b = 0; b < B; ++b) {
      double task_sum = 0.0;
      for (long i = 0; i < n_tar; ++i)
        task_sum += detail::logsumexp(ll.row(b * n_tar + i)) - log_m;
      acc += task_sum / static_cast<double>(n_tar);
    }
    return acc / static_cast<double>(B);
  }

  ContextRepr<S> repr = encode_context(bound, v, cfg, task.ctx.x, task.ctx.y, B);
  Value<S> query = tape.leaf(task.tar.x.cast<S>());
  std::optional<Value<S>> readout;
  if (v.id != VariantId::np && v.id != VariantId::bnp)
    readout = context_readout(bound, cfg, repr, query, n_tar);

  if (!v.has_latent()) {  // cnp, canp: K plays no role
    Pred<S> pred =
        detail::decode_with(bound, v, cfg, readout, std::nullopt, query, n_tar);
    const Matd mu = tape.val(pred.mean).template cast<double>();
    const Matd sd = tape.val(pred.std).template cast<double>();
    const Vecd ll = detail::pointwise_ll(task.clean_tar_y, mu, sd);
    double acc = 0.0;
    for (long b = 0; b < B; ++b)
      acc += ll.segment(b * n_tar, n_tar).sum() / static_cast<double>(n_tar);
    return acc / static_cast<double>(B);
  }

  // np / anp: importance sampling with proposal q(z | ctx ∪ tar).
  const Matd ux = detail::stack_union(task.ctx.x, task.tar.x, B, task.n_ctx,
                                      task.n_tar);
  const Matd uy = detail::stack_union(task.ctx.y, task.tar.y, B, task.n_ctx,
                                      task.n_tar);
  LatentDist<S> q = encode_latent(bound, cfg, ux, uy, B);
  LatentDist<S> p = encode_latent(bound, cfg, task.ctx.x, task.ctx.y, B);
  const Matd q_mu = tape.val(q.mean).template cast<double>();
  const Matd q_sd = tape.val(q.std).template cast<double>();
  const Matd p_mu = tape.val(p.mean).template cast<double>();
  const Matd p_sd = tape.val(p.std).template cast<double>();
  const Matd readout_mat =
      readout ? tape.val(*readout).template cast<double>() : Matd();

  Matd log_w(B, K);
  for (long k = 0; k < K; ++k) {
    Matd z(B, cfg.z_dim);
    for (long b = 0; b < B; ++b)
      for (long j = 0; j < cfg.z_dim; ++j)
        z(b, j) = q_mu(b, j) + q_sd(b, j) * rng.normal();

    Tape<S> ktape(/*recording=*/false);
    BoundParams<S> kbound(ktape, params);
    Value<S> kquery = ktape.leaf(task.tar.x.cast<S>());
    std::optional<Value<S>> kreadout;
    if (readout) kreadout = ktape.leaf(readout_mat.cast<S>());
    Value<S> kz = ktape.leaf(z.cast<S>());
    Pred<S> pred =
        detail::decode_with(kbound, v, cfg, kreadout, kz, kquery, n_tar);
    const Matd mu = ktape.val(pred.mean).template cast<double>();
    const Matd sd = ktape.val(pred.std).template cast<double>();
    const Vecd ll = detail::pointwise_ll(task.clean_tar_y, mu, sd);

    const Vecd lp = detail::rowwise_gaussian_ll(z, p_mu, p_sd);
    const Vecd lq = detail::rowwise_gaussian_ll(z, q_mu, q_sd);
    for (long b = 0; b < B; ++b)
      log_w(b, k) = ll.segment(b * n_tar, n_tar).sum() + lp(b) - lq(b);
  }

  const double log_k = std::log(static_cast<double>(K));
  double acc = 0.0;
  for (long b = 0; b < B; ++b)
    acc += (detail::logsumexp(log_w.row(b)) - log_k) / static_cast<double>(n_tar);
  return acc / static_cast<double>(B);
}

// A seeded, model-independent evaluation set: n_tasks tasks split into
// batches of eval_batch (sizes drawn per batch), shared across models so
// orderings are comparable.
inline std::vector<TaskBatch> build_eval_fixture(const TaskConfig& base,
                                                 Setup setup,
                                                 const EvalConfig& ecfg) {
  ecfg.validate();
  Rng rng(ecfg.fixture_seed);
  std::vector<TaskBatch> batches;
  long remaining = ecfg.n_tasks;
  while (remaining > 0) {
    TaskConfig cfg = base;
    cfg.batch = std::min(ecfg.eval_batch, remaining);
    batches.push_back(make_task(cfg, setup, Phase::eval, rng));
    remaining -= cfg.batch;
  }
  return batches;
}

// Mean per-point target log-likelihood of one model over a fixture.
template <class S>
double evaluate_on_fixture(ParamStore<S>& params, ModelVariant v,
                           const ModelConfig& cfg,
                           const std::vector<TaskBatch>& fixture, long K,
                           std::uint64_t eval_seed = 123) {
  Rng rng(eval_seed);
  double acc = 0.0;
  long total = 0;
  for (const auto& task : fixture) {
    acc += target_log_likelihood(params, v, cfg, task, K, rng) *
           static_cast<double>(task.batch);
    total += task.batch;
  }
  return acc / static_cast<double>(total);
}

// One evaluation record; aggregation handles the mean +- std over seeds.
struct EvalRow {
  std::string dataset;  // "gp" or image set name
  std::string kernel;
  std::string model;
  int setup = 3;
  double noise_s = 0.0;
  double noise_r = 0.0;
  std::uint64_t seed = 0;
  double target_ll = 0.0;
  long n_tasks = 0;
  long k_eval = 0;
  double w_sigma = 0.0;
};

struct EvalAggregate {
  std::string key;  // dataset/kernel/model/setup/noise
  double mean = 0.0;
  double std = 0.0;  // sample std over seeds; meaningful only if count >= 2
  long count = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;

  // Group rows over seeds; std uses the n-1 normalizer.
  std::vector<EvalAggregate> aggregate() const {
    std::map<std::string, std::vector<double>> groups;
    for (const auto& r : rows) {
      char key[256];
      std::snprintf(key, sizeof(key), "%s/%s/%s/setup%d/s%.4g/r%.4g",
                    r.dataset.c_str(), r.kernel.c_str(), r.model.c_str(),
                    r.setup, r.noise_s, r.noise_r);
      groups[key].push_back(r.target_ll);
    }
    std::vector<EvalAggregate> out;
    for (const auto& [key, vals] : groups) {
      EvalAggregate a;
      a.key = key;
      a.count = static_cast<long>(vals.size());
      double s = 0.0;
      for (double v : vals) s += v;
      a.mean = s / static_cast<double>(vals.size());
      if (vals.size() >= 2) {
        double ss = 0.0;
        for (double v : vals) ss += (v - a.mean) * (v - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(vals.size() - 1));
      }
      out.push_back(a);
    }
    return out;
  }
};

}  // namespace noisynp
