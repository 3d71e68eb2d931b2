#include <catch2/catch_amalgamated.hpp>

#include "noisynp/gp_oracle.hpp"
#include "noisynp/kernels.hpp"
#include "noisynp/noise.hpp"
#include "noisynp/rng.hpp"
#include "noisynp/tasks.hpp"

using namespace noisynp;
using Catch::Approx;

namespace {

Matd grid_x(std::initializer_list<double> xs) {
  Matd m(static_cast<long>(xs.size()), 1);
  long i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}

// Independent conditioning route: Schur complement on the explicit joint
// Gram matrix, with the context block inverted by LU.
void brute_force_posterior(const KernelParams& kp, const Matd& ctx_x,
                           const Vecd& ctx_y, double obs_var,
                           const Matd& query_x, Vecd& mean, Matd& cov) {
  const long n = ctx_x.rows(), m = query_x.rows();
  Matd joint_x(n + m, ctx_x.cols());
  joint_x << ctx_x, query_x;
  Matd k = gram_matrix(kp, joint_x);
  Matd kcc = k.topLeftCorner(n, n);
  kcc.diagonal().array() += obs_var;
  const Matd kcq = k.topRightCorner(n, m);
  const Matd kqq = k.bottomRightCorner(m, m);
  const Matd kcc_inv = kcc.inverse();
  mean = kcq.transpose() * kcc_inv * ctx_y;
  cov = kqq - kcq.transpose() * kcc_inv * kcq;
}

}  // namespace

TEST_CASE("rng determinism and stream independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(42), d(43);
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ |= (c.next_u64() != d.next_u64());
  REQUIRE(differ);

  Rng e(7);
  const std::string state = e.serialize();
  const double x1 = e.normal();
  Rng f;
  f.deserialize(state);
  REQUIRE(f.normal() == x1);
}

TEST_CASE("rng uniform and normal moments") {
  Rng rng(1);
  const long n = 200000;
  double sum = 0, sumsq = 0;
  for (long i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    sumsq += u * u;
  }
  REQUIRE(sum / n == Approx(0.5).margin(3.0 / std::sqrt(12.0 * n)));
  double nsum = 0, nsumsq = 0;
  for (long i = 0; i < n; ++i) {
    const double z = rng.normal();
    nsum += z;
    nsumsq += z * z;
  }
  REQUIRE(nsum / n == Approx(0.0).margin(3.0 / std::sqrt(static_cast<double>(n))));
  REQUIRE(nsumsq / n == Approx(1.0).epsilon(0.02));
}

TEST_CASE("sample_kernel_params degenerate and contained ranges") {
  Rng rng(3);
  KernelSpec spec;
  spec.length_scale_lo = spec.length_scale_hi = 0.6;
  spec.output_scale_lo = spec.output_scale_hi = 1.0;
  const KernelParams p = sample_kernel_params(spec, rng);
  REQUIRE(p.length_scale == 0.6);
  REQUIRE(p.output_scale == 1.0);

  KernelSpec wide;  // defaults
  for (int i = 0; i < 200; ++i) {
    const KernelParams q = sample_kernel_params(wide, rng);
    REQUIRE(q.length_scale >= wide.length_scale_lo);
    REQUIRE(q.length_scale < wide.length_scale_hi);
    REQUIRE(q.output_scale >= wide.output_scale_lo);
    REQUIRE(q.output_scale < wide.output_scale_hi);
  }

  KernelSpec bad;
  bad.length_scale_lo = -1.0;
  REQUIRE_THROWS_AS(sample_kernel_params(bad, rng), ConfigError);
}

TEST_CASE("sample_kernel_params Monte Carlo mean of uniform draw") {
  Rng rng(11);
  KernelSpec spec;
  spec.length_scale_lo = 0.6;
  spec.length_scale_hi = 1.0;
  const long n = 10000;
  double sum = 0;
  for (long i = 0; i < n; ++i) sum += sample_kernel_params(spec, rng).length_scale;
  const double se = (1.0 - 0.6) / std::sqrt(12.0 * n);
  REQUIRE(sum / n == Approx(0.8).margin(3 * se));
}

TEST_CASE("gram matrix closed forms and structure") {
  KernelParams p;
  p.family = KernelFamily::rbf;
  p.length_scale = 0.6;
  p.output_scale = 1.0;
  const Matd k = gram_matrix(p, grid_x({0.0, 0.6}));
  REQUIRE(k(0, 0) == Approx(1.0));
  REQUIRE(k(1, 1) == Approx(1.0));
  REQUIRE(k(0, 1) == Approx(std::exp(-0.5)).epsilon(1e-12));
  REQUIRE(k(0, 1) == k(1, 0));

  p.output_scale = 0.7;
  for (auto fam : {KernelFamily::rbf, KernelFamily::matern52, KernelFamily::periodic}) {
    p.family = fam;
    Rng rng(5);
    Matd xs(20, 1);
    for (long i = 0; i < 20; ++i) xs(i, 0) = rng.uniform(-2, 2);
    const Matd g = gram_matrix(p, xs);
    for (long i = 0; i < 20; ++i)
      REQUIRE(g(i, i) == Approx(0.49).epsilon(1e-12));
    const Eigen::SelfAdjointEigenSolver<Matd> es(g);
    REQUIRE(es.eigenvalues().minCoeff() >= -1e-8 * 0.49);
  }
}

TEST_CASE("sample_function marginal std at a single point") {
  KernelParams p;
  p.output_scale = 1.0;
  Rng rng(17);
  const Matd xs = grid_x({0.3});
  const long n = 100000;
  double sumsq = 0;
  for (long i = 0; i < n; ++i) {
    const double y = sample_function(p, xs, rng)(0);
    sumsq += y * y;
  }
  const double target = std::sqrt(1.0 + kSampleJitter);
  const double std = std::sqrt(sumsq / n);
  REQUIRE(std >= 0.99 * target);
  REQUIRE(std <= 1.01 * target);
}

TEST_CASE("sample_function tolerates duplicated inputs via jitter") {
  KernelParams p;
  Rng rng(2);
  const Matd xs = grid_x({0.5, 0.5, 0.5});
  REQUIRE_NOTHROW(sample_function(p, xs, rng));
}

TEST_CASE("sample_function empirical covariance matches the gram matrix") {
  KernelParams p;
  p.length_scale = 0.8;
  p.output_scale = 1.0;
  Rng rng(23);
  const Matd xs = grid_x({-1.0, -0.4, 0.1, 0.9, 1.7});
  Matd k = gram_matrix(p, xs);
  k.diagonal().array() += kSampleJitter;
  const long reps = 100000;
  Matd cov = Matd::Zero(5, 5);
  for (long r = 0; r < reps; ++r) {
    const Vecd y = sample_function(p, xs, rng);
    cov += y * y.transpose();
  }
  cov /= static_cast<double>(reps);
  for (long i = 0; i < 5; ++i) {
    for (long j = 0; j < 5; ++j) {
      const double se =
          std::sqrt((k(i, i) * k(j, j) + k(i, j) * k(i, j)) / reps);
      REQUIRE(cov(i, j) == Approx(k(i, j)).margin(3 * se));
    }
  }
}

TEST_CASE("y normalization: unit output scale gives unit marginal std") {
  KernelSpec spec;
  spec.output_scale_lo = spec.output_scale_hi = 1.0;
  Rng rng(31);
  double sumsq = 0;
  long count = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    const KernelParams p = sample_kernel_params(spec, rng);
    Matd xs(50, 1);
    for (long i = 0; i < 50; ++i) xs(i, 0) = rng.uniform(-2, 2);
    const Vecd y = sample_function(p, xs, rng);
    sumsq += y.squaredNorm();
    count += y.size();
  }
  const double std = std::sqrt(sumsq / count);
  REQUIRE(std >= 0.97);
  REQUIRE(std <= 1.03);
}

TEST_CASE("inject_noise identities and exact mask cardinality") {
  Rng rng(41);
  Vecd y(10);
  for (long i = 0; i < 10; ++i) y(i) = rng.normal();

  SECTION("zero noise level is a bit-exact identity") {
    auto [out, mask] = inject_noise(y, NoiseSpec::level(0.0), rng);
    REQUIRE(out == y);
    for (bool m : mask) REQUIRE_FALSE(m);
  }

  SECTION("full rate masks everything") {
    auto [out, mask] = inject_noise(y, NoiseSpec::decoupled(0.5, 1.0), rng);
    for (bool m : mask) REQUIRE(m);
  }

  SECTION("unmasked entries are bit-identical") {
    auto [out, mask] = inject_noise(y, NoiseSpec::level(0.5), rng);
    for (long i = 0; i < 10; ++i)
      if (!mask[static_cast<std::size_t>(i)]) REQUIRE(out(i) == y(i));
  }

  SECTION("cardinality equals round(r*n) exhaustively, round half to even") {
    for (long n = 1; n <= 100; ++n) {
      Vecd v = Vecd::Zero(n);
      for (double r : {0.0, 0.25, 0.5, 1.0}) {
        auto [out, mask] = inject_noise(v, NoiseSpec::decoupled(0.1, r), rng);
        long count = 0;
        for (bool m : mask) count += m;
        REQUIRE(count == round_half_even(r * static_cast<double>(n)));
      }
    }
    REQUIRE(round_half_even(0.5) == 0);
    REQUIRE(round_half_even(1.5) == 2);
    REQUIRE(round_half_even(2.5) == 2);
    REQUIRE(round_half_even(3.5) == 4);
  }
}

TEST_CASE("inject_noise Monte Carlo statistics") {
  Rng rng(53);
  const long n = 10000;
  Vecd y = Vecd::Zero(n);
  auto [out, mask] = inject_noise(y, NoiseSpec::level(0.5), rng);
  long count = 0;
  double sumsq = 0;
  for (long i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      ++count;
      sumsq += out(i) * out(i);
    }
  }
  REQUIRE(count == 5000);
  const double std = std::sqrt(sumsq / count);
  REQUIRE(std >= 0.49);
  REQUIRE(std <= 0.51);
}

TEST_CASE("gp posterior oracle prior, interpolation and log-likelihood") {
  KernelParams p;
  p.output_scale = 0.9;

  SECTION("empty context returns the prior") {
    PointSet ctx;
    ctx.x.resize(0, 1);
    ctx.y.resize(0, 1);
    const GpPosterior post =
        gp_posterior_oracle(p, ctx, 0.0, grid_x({-1.0, 0.0, 2.0}));
    for (long i = 0; i < 3; ++i) {
      REQUIRE(post.mean(i) == 0.0);
      REQUIRE(post.cov(i, i) == Approx(0.81).epsilon(1e-12));
    }
  }

  SECTION("noiseless interpolation pins the posterior at a context point") {
    PointSet ctx;
    ctx.x = grid_x({-0.5, 0.4, 1.2});
    ctx.y.resize(3, 1);
    ctx.y << 0.3, -0.7, 1.1;
    const GpPosterior post = gp_posterior_oracle(p, ctx, 0.0, grid_x({0.4}));
    REQUIRE(post.mean(0) == Approx(-0.7).margin(1e-6));
    REQUIRE(post.cov(0, 0) <= 1e-6);
  }

  SECTION("matches brute-force joint conditioning") {
    Rng rng(67);
    for (int rep = 0; rep < 20; ++rep) {
      KernelParams kp;
      kp.length_scale = rng.uniform(0.6, 1.0);
      kp.output_scale = rng.uniform(0.4, 1.0);
      PointSet ctx;
      ctx.x = grid_x({rng.uniform(-2, -1), rng.uniform(-0.5, 0.5),
                      rng.uniform(1, 2)});
      ctx.y.resize(3, 1);
      for (long i = 0; i < 3; ++i) ctx.y(i, 0) = rng.normal();
      const Matd qx = grid_x({rng.uniform(-2, 0), rng.uniform(0, 2)});
      const double obs = (rep % 2 == 0) ? 0.0 : rng.uniform(0.01, 0.1);
      const GpPosterior post = gp_posterior_oracle(kp, ctx, obs, qx);
      Vecd bf_mean;
      Matd bf_cov;
      brute_force_posterior(kp, ctx.x, ctx.y.col(0), obs, qx, bf_mean, bf_cov);
      REQUIRE((post.mean - bf_mean).cwiseAbs().maxCoeff() < 1e-8);
      REQUIRE((post.cov - bf_cov).cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  SECTION("joint log-likelihood matches a direct density evaluation") {
    PointSet ctx;
    ctx.x = grid_x({-1.0, 0.5});
    ctx.y.resize(2, 1);
    ctx.y << 0.2, -0.4;
    const Matd qx = grid_x({0.0, 1.5});
    Vecd qy(2);
    qy << 0.1, -0.2;
    const GpPosterior post = gp_posterior_oracle(p, ctx, 0.05, qx, &qy);
    Matd sigma = post.cov;
    sigma.diagonal().array() += 0.05;
    const Vecd resid = qy - post.mean;
    const double direct =
        -0.5 * (2 * kLog2Pi + std::log(sigma.determinant()) +
                resid.dot(sigma.inverse() * resid));
    REQUIRE(post.log_lik == Approx(direct).margin(1e-10));
  }
}

TEST_CASE("make_task setup x phase noise matrix") {
  TaskConfig cfg;
  cfg.batch = 4;
  cfg.noise = NoiseSpec::level(0.99);

  auto mask_count = [](const std::vector<bool>& m) {
    long c = 0;
    for (bool b : m) c += b;
    return c;
  };

  SECTION("setup 1 trains clean") {
    Rng rng(71);
    const TaskBatch tb = make_task(cfg, Setup::one, Phase::train, rng);
    REQUIRE(mask_count(tb.noise_mask_ctx) == 0);
    REQUIRE(mask_count(tb.noise_mask_tar) == 0);
    REQUIRE(tb.tar.y == tb.clean_tar_y);
  }

  SECTION("setup 2 trains with noisy context, clean targets") {
    Rng rng(73);
    const TaskBatch tb = make_task(cfg, Setup::two, Phase::train, rng);
    REQUIRE(mask_count(tb.noise_mask_ctx) > 0);
    REQUIRE(mask_count(tb.noise_mask_tar) == 0);
    REQUIRE(tb.tar.y == tb.clean_tar_y);
  }

  SECTION("setup 3 trains with noise everywhere at the configured rate") {
    Rng rng(79);
    long masked = 0, total = 0;
    for (int rep = 0; rep < 50; ++rep) {
      const TaskBatch tb = make_task(cfg, Setup::three, Phase::train, rng);
      masked += mask_count(tb.noise_mask_ctx) + mask_count(tb.noise_mask_tar);
      total += tb.ctx_rows() + tb.tar_rows();
      REQUIRE(tb.tar.y != tb.clean_tar_y);
    }
    const double frac = static_cast<double>(masked) / total;
    REQUIRE(frac == Approx(0.99).margin(0.01));
  }

  SECTION("eval keeps targets clean in every setup") {
    for (auto setup : {Setup::one, Setup::two, Setup::three}) {
      Rng rng(83);
      const TaskBatch tb = make_task(cfg, setup, Phase::eval, rng);
      REQUIRE(mask_count(tb.noise_mask_ctx) > 0);
      REQUIRE(mask_count(tb.noise_mask_tar) == 0);
      REQUIRE(tb.tar.y == tb.clean_tar_y);
    }
  }

  SECTION("clean targets are the underlying function values") {
    Rng rng(89);
    const TaskBatch tb = make_task(cfg, Setup::three, Phase::eval, rng);
    // Oracle with the generating kernel and near-zero variance at a target
    // point of the same task must agree at that exact input.
    REQUIRE(tb.clean_tar_y.allFinite());
    REQUIRE(tb.gen_params.size() == static_cast<std::size_t>(tb.batch));
  }

  SECTION("identical seeds give bit-identical batches") {
    Rng r1(97), r2(97);
    const TaskBatch a = make_task(cfg, Setup::three, Phase::train, r1);
    const TaskBatch b = make_task(cfg, Setup::three, Phase::train, r2);
    REQUIRE(a.ctx.x == b.ctx.x);
    REQUIRE(a.ctx.y == b.ctx.y);
    REQUIRE(a.tar.x == b.tar.x);
    REQUIRE(a.tar.y == b.tar.y);
    REQUIRE(a.clean_tar_y == b.clean_tar_y);
    REQUIRE(a.noise_mask_ctx == b.noise_mask_ctx);
  }

  SECTION("oversubscribed point budget is a configuration error") {
    TaskConfig bad = cfg;
    bad.n_ctx_hi = 60;
    Rng rng(101);
    REQUIRE_THROWS_AS(make_task(bad, Setup::one, Phase::train, rng),
                      ConfigError);
  }
}
