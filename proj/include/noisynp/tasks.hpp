#pragma once

#include <vector>

#include "noisynp/common.hpp"
#include "noisynp/kernels.hpp"
#include "noisynp/noise.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

enum class Setup { one = 1, two = 2, three = 3 };
enum class Phase { train, eval };

inline Setup setup_from_int(int s) {
  if (s < 1 || s > 3) throw ConfigError("setup must be 1, 2 or 3");
  return static_cast<Setup>(s);
}

struct PointSet {
  Matd x;  // [n, d_x]
  Matd y;  // [n, d_y]
  long size() const { return x.rows(); }
};

// One batch of tasks. All tasks in a batch share n_ctx/n_tar (drawn per
// batch), so per-point tensors are stored flattened as [B*n, d] with task b
// owning rows [b*n, (b+1)*n). Context and target x-locations are drawn
// jointly and split, so the two index sets are disjoint within each task.
struct TaskBatch {
  PointSet ctx;           // possibly noised
  PointSet tar;           // possibly noised (setup 3 train only)
  Matd clean_tar_y;       // noise-free target values, always retained
  std::vector<bool> noise_mask_ctx;  // [B*n_ctx]
  std::vector<bool> noise_mask_tar;  // [B*n_tar]
  Setup setup = Setup::three;
  long batch = 0;
  long n_ctx = 0;
  long n_tar = 0;
  std::vector<KernelParams> gen_params;  // per-task generating kernel

  long ctx_rows() const { return batch * n_ctx; }
  long tar_rows() const { return batch * n_tar; }
};

// Sampling distribution for 1D GP tasks.
struct TaskConfig {
  KernelSpec kernel;
  double x_lo = -2.0, x_hi = 2.0;
  long n_ctx_lo = 3, n_ctx_hi = 47;
  long n_tar_lo = 3;
  long max_points = 50;  // n_tar ~ U{n_tar_lo .. max_points - n_ctx}
  NoiseSpec noise;
  long batch = 16;

  void validate() const {
    kernel.validate();
    noise.validate();
    if (x_lo >= x_hi) throw ConfigError("x range must be nonempty");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (n_ctx_lo < 1 || n_ctx_lo > n_ctx_hi)
      throw ConfigError("bad context size range");
    if (n_ctx_hi + n_tar_lo > max_points)
      throw ConfigError("context+target sizes exceed the point budget");
  }
};

namespace detail {

// Which sets get noise, per the setup x phase matrix. Evaluation always
// keeps targets clean; setup 1 trains fully clean; setup 3 trains with
// noise on both sets.
inline void noise_flags(Setup setup, Phase phase, bool& ctx, bool& tar) {
  if (phase == Phase::train) {
    ctx = (setup != Setup::one);
    tar = (setup == Setup::three);
  } else {
    ctx = true;
    tar = false;
  }
}

}  // namespace detail

inline TaskBatch make_task(const TaskConfig& cfg, Setup setup, Phase phase,
                           Rng& rng) {
  cfg.validate();
  const long n_ctx = rng.uniform_int(cfg.n_ctx_lo, cfg.n_ctx_hi);
  const long n_tar = rng.uniform_int(cfg.n_tar_lo, cfg.max_points - n_ctx);
  const long n = n_ctx + n_tar;
  const long B = cfg.batch;

  TaskBatch tb;
  tb.setup = setup;
  tb.batch = B;
  tb.n_ctx = n_ctx;
  tb.n_tar = n_tar;
  tb.ctx.x.resize(B * n_ctx, 1);
  tb.ctx.y.resize(B * n_ctx, 1);
  tb.tar.x.resize(B * n_tar, 1);
  tb.tar.y.resize(B * n_tar, 1);
  tb.clean_tar_y.resize(B * n_tar, 1);
  tb.noise_mask_ctx.assign(static_cast<std::size_t>(B * n_ctx), false);
  tb.noise_mask_tar.assign(static_cast<std::size_t>(B * n_tar), false);
  tb.gen_params.reserve(static_cast<std::size_t>(B));

  bool noise_ctx = false, noise_tar = false;
  detail::noise_flags(setup, phase, noise_ctx, noise_tar);

  for (long b = 0; b < B; ++b) {
    const KernelParams kp = sample_kernel_params(cfg.kernel, rng);
    tb.gen_params.push_back(kp);
    Matd xs(n, 1);
    for (long i = 0; i < n; ++i) xs(i, 0) = rng.uniform(cfg.x_lo, cfg.x_hi);
    const Vecd f = sample_function(kp, xs, rng);

    Vecd y_ctx = f.head(n_ctx);
    Vecd y_tar = f.tail(n_tar);
    tb.clean_tar_y.block(b * n_tar, 0, n_tar, 1) = y_tar;

    if (noise_ctx) {
      auto [noisy, mask] = inject_noise(y_ctx, cfg.noise, rng);
      y_ctx = noisy;
      for (long i = 0; i < n_ctx; ++i)
        tb.noise_mask_ctx[static_cast<std::size_t>(b * n_ctx + i)] = mask[i];
    }
    if (noise_tar) {
      auto [noisy, mask] = inject_noise(y_tar, cfg.noise, rng);
      y_tar = noisy;
      for (long i = 0; i < n_tar; ++i)
        tb.noise_mask_tar[static_cast<std::size_t>(b * n_tar + i)] = mask[i];
    }

    tb.ctx.x.block(b * n_ctx, 0, n_ctx, 1) = xs.topRows(n_ctx);
    tb.ctx.y.block(b * n_ctx, 0, n_ctx, 1) = y_ctx;
    tb.tar.x.block(b * n_tar, 0, n_tar, 1) = xs.bottomRows(n_tar);
    tb.tar.y.block(b * n_tar, 0, n_tar, 1) = y_tar;
  }
  return tb;
}

}  // namespace noisynp
