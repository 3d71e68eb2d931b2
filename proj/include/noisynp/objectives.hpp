#pragma once

#include <vector>

#include "noisynp/models.hpp"

namespace noisynp {

// Per-step loss components. recon_nll is the negative reconstruction
// log-likelihood (per-task joint, i.e. summed over the reconstruction
// points, averaged over latent samples and the batch); kl is the latent
// divergence summed over z dims and batch-averaged; var_penalty is the
// mean squared predictive std over target points, samples and batch. The
// decomposition total = recon_nll + kl + w_sigma * var_penalty holds
// exactly in these double fields.
struct LossBreakdown {
  double recon_nll = 0.0;
  double kl = 0.0;
  double var_penalty = 0.0;
  double w_sigma = 0.0;
  double total = 0.0;

  void finalize() { total = recon_nll + kl + w_sigma * var_penalty; }
};

struct LossConfig {
  bool include_context_in_recon = true;
  double w_sigma = 0.0;
  long k_train = 1;

  void validate() const {
    if (k_train < 1) throw ConfigError("k_train must be >= 1");
  }
};

// A loss value still attached to the tape, plus its numeric breakdown.
template <class S>
struct TapedLoss {
  LossBreakdown breakdown;
  Value<S> total;
};

// Elementwise Gaussian log-density reduced by mean over points and dims.
inline double gaussian_log_pdf(const Matd& y, const Matd& mu,
                               const Matd& sigma) {
  if (y.rows() != mu.rows() || y.cols() != mu.cols() ||
      y.rows() != sigma.rows() || y.cols() != sigma.cols())
    throw NumericError("gaussian_log_pdf: shape mismatch");
  if ((sigma.array() <= 0.0).any())
    throw NumericError("gaussian_log_pdf: sigma must be > 0");
  const auto diff = (y - mu).array();
  return (-0.5 * kLog2Pi - sigma.array().log() -
          diff.square() / (2.0 * sigma.array().square()))
      .mean();
}

// KL(q || p) for diagonal Gaussians, summed over dimensions.
inline double diag_gaussian_kl(const Vecd& mu_q, const Vecd& sigma_q,
                               const Vecd& mu_p, const Vecd& sigma_p) {
  if ((sigma_q.array() <= 0).any() || (sigma_p.array() <= 0).any())
    throw NumericError("diag_gaussian_kl: stds must be > 0");
  const auto lq = sigma_q.array(), lp = sigma_p.array();
  return (lp.log() - lq.log() +
          (lq.square() + (mu_q.array() - mu_p.array()).square()) /
              (2.0 * lp.square()) -
          0.5)
      .sum();
}

namespace detail {

// Taped elementwise log N(y; mu, sigma).
template <class S>
Value<S> gaussian_ll_elements(Tape<S>& t, Value<S> y, Value<S> mu,
                              Value<S> sigma) {
  Value<S> diff = t.sub(y, mu);
  Value<S> quad = t.div(t.square(diff), t.scale(t.square(sigma), S(2)));
  return t.add_scalar(t.scale(t.add(t.log(sigma), quad), S(-1)),
                      static_cast<S>(-0.5 * kLog2Pi));
}

// Mean over tasks of the per-task sum of log-densities: [B*n, d] -> scalar.
template <class S>
Value<S> recon_ll_scalar(Tape<S>& t, Value<S> y, const Pred<S>& pred, long batch) {
  Value<S> ll = gaussian_ll_elements(t, y, pred.mean, pred.std);
  return t.mean_all(t.row_sum(t.block_sum_rows(ll, batch)));
}

// Batch-mean KL(q || p), summed over z dims. Operates on [B, z] stacks.
template <class S>
Value<S> kl_scalar(Tape<S>& t, const LatentDist<S>& q, const LatentDist<S>& p) {
  Value<S> term = t.add_scalar(
      t.add(t.sub(t.log(p.std), t.log(q.std)),
            t.div(t.add(t.square(q.std), t.square(t.sub(q.mean, p.mean))),
                  t.scale(t.square(p.std), S(2)))),
      S(-0.5));
  return t.mean_all(t.row_sum(term));
}

// Observed y values aligned with the recon query rows.
template <class S>
Value<S> recon_targets_leaf(Tape<S>& t, const ModelOutput<S>& output,
                            const TaskBatch& task) {
  Matd y = output.query_includes_ctx
               ? stack_union(task.ctx.y, task.tar.y, task.batch, task.n_ctx,
                             task.n_tar)
               : task.tar.y;
  return t.leaf(y.cast<S>());
}

// sigma^2 averaged over the target rows of one prediction -> scalar.
template <class S>
Value<S> pred_var_scalar(Tape<S>& t, const ModelOutput<S>& output,
                         const Pred<S>& pred, long n_tar) {
  Value<S> s2 = t.square(pred.std);
  if (output.query_includes_ctx)
    s2 = t.block_tail_rows(s2, output.batch, n_tar);
  return t.mean_all(s2);
}

}  // namespace detail

// Mean squared predictive std over targets, samples/members and batch.
template <class S>
Value<S> variance_penalty(Tape<S>& t, const ModelOutput<S>& output,
                          long n_tar) {
  std::vector<Value<S>> per_branch;
  per_branch.reserve(output.predictions.size());
  for (const auto& pred : output.predictions)
    per_branch.push_back(detail::pred_var_scalar(t, output, pred, n_tar));
  std::vector<S> coeffs(per_branch.size(),
                        S(1) / static_cast<S>(per_branch.size()));
  return t.weighted_sum(per_branch, coeffs);
}

namespace detail {

// Shared skeleton: negative recon (optionally plus KL) with the bootstrap
// combination rule "base loss plus mean of member losses".
template <class S>
TapedLoss<S> assemble_loss(BoundParams<S>& p, const ModelOutput<S>& output,
                           const TaskBatch& task, bool with_kl,
                           double w_sigma, long n_tar) {
  Tape<S>& t = p.tape();
  Value<S> y = recon_targets_leaf(t, output, task);

  std::vector<Value<S>> scalars;
  std::vector<S> coeffs;
  double recon_nll = 0.0, kl_val = 0.0;

  auto push = [&](Value<S> v, double w) {
    scalars.push_back(v);
    coeffs.push_back(static_cast<S>(w));
    return w * static_cast<double>(t.val(v)(0, 0));
  };

  if (!output.bootstrapped) {
    // Recon averaged over the K latent samples.
    const double kw = -1.0 / static_cast<double>(output.predictions.size());
    for (const auto& pred : output.predictions)
      recon_nll += push(recon_ll_scalar(t, y, pred, output.batch), kw);
    if (with_kl) kl_val += push(kl_scalar(t, output.q, output.p), 1.0);
  } else {
    // predictions[0] is the base path; the member losses enter as a mean.
    const long members = static_cast<long>(output.predictions.size()) - 1;
    const double mw = -1.0 / static_cast<double>(std::max<long>(members, 1));
    for (std::size_t i = 0; i < output.predictions.size(); ++i) {
      recon_nll += push(recon_ll_scalar(t, y, output.predictions[i], output.batch),
                        i == 0 ? -1.0 : mw);
    }
    if (with_kl && output.has_latent) {
      kl_val += push(kl_scalar(t, output.q, output.p), 1.0);
      for (std::size_t m = 0; m < output.member_q.size(); ++m) {
        kl_val += push(kl_scalar(t, output.member_q[m], output.member_p[m]),
                       1.0 / static_cast<double>(output.member_q.size()));
      }
    }
  }

  TapedLoss<S> loss;
  Value<S> pen = variance_penalty(t, output, n_tar);
  loss.breakdown.var_penalty = static_cast<double>(t.val(pen)(0, 0));
  if (w_sigma != 0.0) {
    scalars.push_back(pen);
    coeffs.push_back(static_cast<S>(w_sigma));
  }
  loss.total = t.weighted_sum(scalars, coeffs);
  loss.breakdown.recon_nll = recon_nll;
  loss.breakdown.kl = kl_val;
  loss.breakdown.w_sigma = w_sigma;
  loss.breakdown.finalize();
  return loss;
}

}  // namespace detail

// Standard NP objective: recon over the union of context and target points
// (the output must have been decoded with query_includes_ctx), KL between
// q on the union and p on the context, no variance term.
template <class S>
TapedLoss<S> np_loss(BoundParams<S>& p, const ModelOutput<S>& output,
                     const TaskBatch& task, const LossConfig& cfg) {
  cfg.validate();
  if (!output.has_latent)
    throw ConfigError("np_loss requires a latent variant; use cnp_loss");
  return detail::assemble_loss(p, output, task, /*with_kl=*/true,
                               /*w_sigma=*/0.0, task.n_tar);
}

// Latent-free reduction: negative mean log-likelihood over the configured
// point set, kl identically zero.
template <class S>
TapedLoss<S> cnp_loss(BoundParams<S>& p, const ModelOutput<S>& output,
                      const TaskBatch& task, const LossConfig& cfg) {
  cfg.validate();
  if (output.has_latent)
    throw ConfigError("cnp_loss requires a deterministic variant; use np_loss");
  return detail::assemble_loss(p, output, task, /*with_kl=*/false,
                               /*w_sigma=*/0.0, task.n_tar);
}

// Robust objective: recon over target points only (unless the all-points
// ablation re-includes the context), KL as usual, plus w_sigma times the
// mean predicted variance over targets.
template <class S>
TapedLoss<S> robust_loss(BoundParams<S>& p, const ModelOutput<S>& output,
                         const TaskBatch& task, const LossConfig& cfg) {
  cfg.validate();
  return detail::assemble_loss(p, output, task,
                               /*with_kl=*/output.has_latent, cfg.w_sigma,
                               task.n_tar);
}

// Dispatch used by the trainer: robust flag selects Eq.-4-style wiring,
// otherwise the standard objective for the variant family.
template <class S>
TapedLoss<S> training_loss(BoundParams<S>& p, ModelVariant v,
                           const ModelOutput<S>& output, const TaskBatch& task,
                           const LossConfig& cfg) {
  if (v.robust) return robust_loss(p, output, task, cfg);
  return output.has_latent ? np_loss(p, output, task, cfg)
                           : cnp_loss(p, output, task, cfg);
}

}  // namespace noisynp
