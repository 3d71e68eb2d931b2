#pragma once

#include <limits>

#include "noisynp/common.hpp"
#include "noisynp/kernels.hpp"
#include "noisynp/tasks.hpp"

namespace noisynp {

struct GpPosterior {
  Vecd mean;       // [n_query]
  Matd cov;        // [n_query, n_query], latent-function covariance
  double log_lik;  // joint log N(query_y; mean, cov + obs_noise_var I)
};

// Closed-form conditional of the generating process:
//   mean = K*^T (K + s_n^2 I)^-1 y,  cov = K** - K*^T (K + s_n^2 I)^-1 K*.
// Empty context gives the prior. Solves are exact when the system factors
// without jitter. The log-likelihood is of observed values, so the
// observation noise reappears on the predictive diagonal. Validation
// ceiling only, never part of any model path.
inline GpPosterior gp_posterior_oracle(const KernelParams& params,
                                       const PointSet& ctx,
                                       double obs_noise_var,
                                       const Matd& query_x,
                                       const Vecd* query_y = nullptr) {
  if (obs_noise_var < 0) throw ConfigError("obs_noise_var must be >= 0");
  const long m = query_x.rows();
  const long n = ctx.size();
  GpPosterior post;
  post.mean = Vecd::Zero(m);
  post.cov = gram_matrix(params, query_x);

  if (n > 0) {
    Matd k_cc = gram_matrix(params, ctx.x);
    k_cc.diagonal().array() += obs_noise_var;
    Matd k_cq(n, m);
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < m; ++j) {
        k_cq(i, j) =
            kernel_value(params, (ctx.x.row(i) - query_x.row(j)).norm());
      }
    }
    const Eigen::LLT<Matd> llt =
        chol_with_jitter(k_cc, params.output_scale, /*try_exact_first=*/true);
    const Matd alpha = llt.solve(k_cq);  // (K + s_n^2 I)^-1 K*
    post.mean = alpha.transpose() * ctx.y.col(0);
    post.cov -= k_cq.transpose() * alpha;
    post.cov = 0.5 * (post.cov + post.cov.transpose()).eval();
  }

  post.log_lik = std::numeric_limits<double>::quiet_NaN();
  if (query_y != nullptr) {
    Matd sigma = post.cov;
    sigma.diagonal().array() += obs_noise_var;
    const Eigen::LLT<Matd> llt =
        chol_with_jitter(sigma, params.output_scale, /*try_exact_first=*/true);
    const Vecd resid = *query_y - post.mean;
    const Vecd w = llt.solve(resid);
    double log_det = 0.0;
    const auto& l = llt.matrixLLT();
    for (long i = 0; i < m; ++i) log_det += 2.0 * std::log(l(i, i));
    post.log_lik =
        -0.5 * (static_cast<double>(m) * kLog2Pi + log_det + resid.dot(w));
  }
  return post;
}

}  // namespace noisynp
