#include <catch2/catch_amalgamated.hpp>

#include "noisynp/gradcheck.hpp"
#include "noisynp/objectives.hpp"

using namespace noisynp;
using Catch::Approx;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.backbone.hidden_dim = 16;
  cfg.backbone.n_heads = 4;
  cfg.backbone.depth_enc = 3;
  cfg.backbone.depth_dec = 2;
  cfg.z_dim = 8;
  cfg.train_bootstrap = 3;
  return cfg;
}

TaskBatch tiny_task(long batch, long n_ctx, long n_tar, double noise_level,
                    std::uint64_t seed, Setup setup = Setup::three) {
  TaskConfig cfg;
  cfg.batch = batch;
  cfg.n_ctx_lo = cfg.n_ctx_hi = n_ctx;
  cfg.n_tar_lo = n_tar;
  cfg.max_points = n_ctx + n_tar;
  cfg.noise = NoiseSpec::level(noise_level);
  Rng rng(seed);
  return make_task(cfg, setup, Phase::train, rng);
}

// Synthetic single-prediction output over the task's target rows.
ModelOutput<double> fixed_output(Tape<double>& t, const Matd& mu,
                                 const Matd& sigma, long batch,
                                 bool has_latent) {
  ModelOutput<double> out;
  out.batch = batch;
  out.n_query = mu.rows() / batch;
  out.query_includes_ctx = false;
  out.has_latent = has_latent;
  out.K = 1;
  Pred<double> pred;
  pred.mean = t.leaf(mu);
  pred.std = t.leaf(sigma);
  out.predictions.push_back(pred);
  if (has_latent) {
    out.q.mean = t.leaf(Matd::Zero(batch, 2));
    out.q.std = t.leaf(Matd::Constant(batch, 2, 1.0));
    out.p.mean = t.leaf(Matd::Zero(batch, 2));
    out.p.std = t.leaf(Matd::Constant(batch, 2, 1.0));
  }
  return out;
}

}  // namespace

TEST_CASE("gaussian_log_pdf closed forms and normalization") {
  Matd y(1, 1), mu(1, 1), sigma(1, 1);
  y << 0.0;
  mu << 0.0;
  sigma << 1.0;
  REQUIRE(gaussian_log_pdf(y, mu, sigma) ==
          Approx(-0.5 * kLog2Pi).margin(1e-12));
  REQUIRE(gaussian_log_pdf(y, mu, sigma) == Approx(-0.91894).margin(1e-5));

  y << 1.0;
  REQUIRE(gaussian_log_pdf(y, mu, sigma) == Approx(-1.41894).margin(1e-5));

  SECTION("quadrature over y integrates the density to one") {
    const double m = 0.4, s = 0.7;
    const long steps = 200000;
    const double lo = m - 8 * s, hi = m + 8 * s;
    const double dx = (hi - lo) / steps;
    double integral = 0.0;
    Matd yy(1, 1), mm(1, 1), ss(1, 1);
    mm << m;
    ss << s;
    for (long i = 0; i <= steps; ++i) {
      yy << lo + i * dx;
      const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
      integral += w * std::exp(gaussian_log_pdf(yy, mm, ss)) * dx;
    }
    REQUIRE(integral == Approx(1.0).margin(1e-6));
  }

  SECTION("non-positive sigma is rejected") {
    sigma << 0.0;
    REQUIRE_THROWS_AS(gaussian_log_pdf(y, mu, sigma), NumericError);
  }
}

TEST_CASE("diag_gaussian_kl identities and Monte Carlo oracle") {
  Vecd mu_q(3), sd_q(3), mu_p(3), sd_p(3);
  mu_q << 0.1, -0.4, 0.9;
  sd_q << 0.5, 1.2, 0.8;

  SECTION("KL(q||q) is exactly zero") {
    REQUIRE(diag_gaussian_kl(mu_q, sd_q, mu_q, sd_q) == 0.0);
  }

  SECTION("unit-gaussian mean shift has KL 1/2") {
    Vecd m1(1), s1(1), m0(1), s0(1);
    m1 << 1.0;
    s1 << 1.0;
    m0 << 0.0;
    s0 << 1.0;
    REQUIRE(diag_gaussian_kl(m1, s1, m0, s0) == Approx(0.5).margin(1e-12));
  }

  SECTION("Monte Carlo estimate agrees within 3 standard errors") {
    mu_p << -0.2, 0.3, 0.5;
    sd_p << 0.9, 0.7, 1.1;
    const double exact = diag_gaussian_kl(mu_q, sd_q, mu_p, sd_p);
    Rng rng(5);
    const long n = 1000000;
    double sum = 0, sumsq = 0;
    for (long i = 0; i < n; ++i) {
      double lr = 0.0;
      for (long j = 0; j < 3; ++j) {
        const double z = mu_q(j) + sd_q(j) * rng.normal();
        auto lg = [](double x, double m, double s) {
          const double d = (x - m) / s;
          return -0.5 * kLog2Pi - std::log(s) - 0.5 * d * d;
        };
        lr += lg(z, mu_q(j), sd_q(j)) - lg(z, mu_p(j), sd_p(j));
      }
      sum += lr;
      sumsq += lr * lr;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sumsq / n - mean * mean) / n);
    REQUIRE(mean == Approx(exact).margin(3 * se));
  }

  SECTION("KL is nonnegative for random valid distributions") {
    Rng rng(7);
    for (int rep = 0; rep < 500; ++rep) {
      Vecd a(4), b(4), c(4), d(4);
      for (long j = 0; j < 4; ++j) {
        a(j) = rng.normal();
        c(j) = rng.normal();
        b(j) = 0.1 + rng.uniform() * 2;
        d(j) = 0.1 + rng.uniform() * 2;
      }
      REQUIRE(diag_gaussian_kl(a, b, c, d) >= -1e-8);
    }
  }
}

TEST_CASE("variance penalty reductions") {
  Tape<double> t(false);

  SECTION("constant sigma c gives c^2") {
    auto out = fixed_output(t, Matd::Zero(6, 1), Matd::Constant(6, 1, 0.7), 2,
                            false);
    Value<double> pen = variance_penalty(t, out, 3);
    REQUIRE(t.val(pen)(0, 0) == Approx(0.49).margin(1e-12));
  }

  SECTION("single target, single sample") {
    Matd s(1, 1);
    s << 0.6;
    auto out = fixed_output(t, Matd::Zero(1, 1), s, 1, false);
    Value<double> pen = variance_penalty(t, out, 1);
    REQUIRE(t.val(pen)(0, 0) == Approx(0.36).margin(1e-15));
  }

  SECTION("matches a brute-force triple loop") {
    Rng rng(11);
    const long B = 3, n = 4, samples = 5;
    ModelOutput<double> out;
    out.batch = B;
    out.n_query = n;
    out.query_includes_ctx = false;
    out.has_latent = true;
    double brute = 0.0;
    for (long k = 0; k < samples; ++k) {
      Matd sd(B * n, 1);
      for (long i = 0; i < B * n; ++i) sd(i, 0) = 0.1 + rng.uniform();
      Pred<double> pred;
      pred.mean = t.leaf(Matd::Zero(B * n, 1));
      pred.std = t.leaf(sd);
      out.predictions.push_back(pred);
      for (long b = 0; b < B; ++b)
        for (long i = 0; i < n; ++i) brute += sd(b * n + i, 0) * sd(b * n + i, 0);
    }
    brute /= static_cast<double>(B * n * samples);
    Value<double> pen = variance_penalty(t, out, n);
    REQUIRE(t.val(pen)(0, 0) == Approx(brute).margin(1e-12));
  }
}

TEST_CASE("np_loss components and independent recomputation") {
  const ModelConfig cfg = tiny_config();
  const ModelVariant v = ModelVariant::parse("np");
  ParamStore<double> params;
  Rng init(13);
  init_model(params, v, cfg, init);
  const TaskBatch task = tiny_task(2, 3, 2, 0.3, 17);
  LossConfig lcfg;
  lcfg.include_context_in_recon = true;

  Tape<double> t(false);
  BoundParams<double> bp(t, params);
  Rng fwd(19);
  const auto out = forward(bp, v, cfg, task, 2, fwd, Phase::train, true);
  const TapedLoss<double> loss = np_loss(bp, out, task, lcfg);

  SECTION("decomposition identity with w forced to zero") {
    REQUIRE(loss.breakdown.w_sigma == 0.0);
    REQUIRE(loss.breakdown.total ==
            Approx(loss.breakdown.recon_nll + loss.breakdown.kl).margin(1e-12));
  }

  SECTION("recon equals an independent per-point recomputation") {
    const Matd y = detail::stack_union(task.ctx.y, task.tar.y, task.batch,
                                       task.n_ctx, task.n_tar);
    double recon = 0.0;
    for (const auto& pred : out.predictions) {
      const Matd mu = t.val(pred.mean);
      const Matd sd = t.val(pred.std);
      double batch_sum = 0.0;
      for (long b = 0; b < task.batch; ++b) {
        double task_sum = 0.0;
        const long n = task.n_ctx + task.n_tar;
        for (long i = 0; i < n; ++i) {
          const double d = y(b * n + i, 0) - mu(b * n + i, 0);
          task_sum += -0.5 * kLog2Pi - std::log(sd(b * n + i, 0)) -
                      d * d / (2 * sd(b * n + i, 0) * sd(b * n + i, 0));
        }
        batch_sum += task_sum;
      }
      recon += -batch_sum / task.batch;
    }
    recon /= static_cast<double>(out.predictions.size());
    REQUIRE(loss.breakdown.recon_nll == Approx(recon).margin(1e-10));
  }

  SECTION("kl equals the closed form on the encoder outputs") {
    double kl = 0.0;
    for (long b = 0; b < task.batch; ++b) {
      kl += diag_gaussian_kl(
          t.val(out.q.mean).row(b).transpose(), t.val(out.q.std).row(b).transpose(),
          t.val(out.p.mean).row(b).transpose(), t.val(out.p.std).row(b).transpose());
    }
    kl /= static_cast<double>(task.batch);
    REQUIRE(loss.breakdown.kl == Approx(kl).margin(1e-10));
  }

  SECTION("deterministic output is rejected") {
    Tape<double> t2(false);
    auto det = fixed_output(t2, Matd::Zero(task.tar_rows(), 1),
                            Matd::Constant(task.tar_rows(), 1, 0.5),
                            task.batch, false);
    BoundParams<double> bp2(t2, params);
    REQUIRE_THROWS_AS(np_loss(bp2, det, task, lcfg), ConfigError);
  }
}

TEST_CASE("np_loss with q equal to p has zero kl") {
  const TaskBatch task = tiny_task(2, 3, 2, 0.0, 23);
  Tape<double> t(false);
  auto out = fixed_output(t, Matd::Zero(task.tar_rows(), 1),
                          Matd::Constant(task.tar_rows(), 1, 0.5), task.batch,
                          true);
  ParamStore<double> params;
  BoundParams<double> bp(t, params);
  LossConfig lcfg;
  lcfg.include_context_in_recon = false;
  const TapedLoss<double> loss = np_loss(bp, out, task, lcfg);
  REQUIRE(loss.breakdown.kl == 0.0);
  REQUIRE(loss.breakdown.total == loss.breakdown.recon_nll);
}

TEST_CASE("cnp_loss identities") {
  SECTION("kl field is always exactly zero") {
    const TaskBatch task = tiny_task(2, 3, 2, 0.3, 29);
    Tape<double> t(false);
    auto out = fixed_output(t, Matd::Zero(task.tar_rows(), 1),
                            Matd::Constant(task.tar_rows(), 1, 0.4),
                            task.batch, false);
    ParamStore<double> params;
    BoundParams<double> bp(t, params);
    const TapedLoss<double> loss = cnp_loss(bp, out, task, LossConfig{});
    REQUIRE(loss.breakdown.kl == 0.0);
  }

  SECTION("perfect single-point prediction hits the closed form") {
    TaskBatch task = tiny_task(1, 3, 1, 0.0, 31);
    Tape<double> t(false);
    const double floor = 0.1;
    auto out = fixed_output(t, task.tar.y, Matd::Constant(1, 1, floor), 1,
                            false);
    ParamStore<double> params;
    BoundParams<double> bp(t, params);
    const TapedLoss<double> loss = cnp_loss(bp, out, task, LossConfig{});
    REQUIRE(loss.breakdown.recon_nll ==
            Approx(0.5 * std::log(2 * 3.14159265358979323846 * floor * floor))
                .margin(1e-10));
  }

  SECTION("equals the latent recon term when z is clamped (shared predictions)") {
    const TaskBatch task = tiny_task(2, 3, 2, 0.0, 37);
    Tape<double> t(false);
    Matd mu = Matd::Random(task.tar_rows(), 1);
    Matd sd = Matd::Constant(task.tar_rows(), 1, 0.8);
    auto det = fixed_output(t, mu, sd, task.batch, false);
    auto lat = fixed_output(t, mu, sd, task.batch, true);  // q == p, K=1
    ParamStore<double> params;
    BoundParams<double> bp(t, params);
    LossConfig lcfg;
    lcfg.include_context_in_recon = false;
    const double a = cnp_loss(bp, det, task, lcfg).breakdown.total;
    const double b = np_loss(bp, lat, task, lcfg).breakdown.total;
    REQUIRE(a == Approx(b).margin(1e-12));
  }

  SECTION("latent output is rejected") {
    const TaskBatch task = tiny_task(1, 3, 1, 0.0, 41);
    Tape<double> t(false);
    auto lat = fixed_output(t, Matd::Zero(1, 1), Matd::Constant(1, 1, 0.5), 1,
                            true);
    ParamStore<double> params;
    BoundParams<double> bp(t, params);
    REQUIRE_THROWS_AS(cnp_loss(bp, lat, task, LossConfig{}), ConfigError);
  }
}

TEST_CASE("robust_loss reductions and linearity in the variance weight") {
  const ModelConfig cfg = tiny_config();
  const ModelVariant v = ModelVariant::parse("r-anp");
  ParamStore<double> params;
  Rng init(43);
  init_model(params, v, cfg, init);
  const TaskBatch task = tiny_task(2, 4, 3, 0.6, 47);

  Tape<double> t(false);
  BoundParams<double> bp(t, params);
  Rng fwd(53);
  const auto out = forward(bp, v, cfg, task, 1, fwd, Phase::train, false);

  LossConfig base_cfg;
  base_cfg.include_context_in_recon = false;
  base_cfg.w_sigma = 0.0;

  SECTION("w=0 equals the target-only standard objective bit for bit") {
    const TapedLoss<double> robust = robust_loss(bp, out, task, base_cfg);
    const TapedLoss<double> standard = np_loss(bp, out, task, base_cfg);
    REQUIRE(robust.breakdown.total == standard.breakdown.total);
    REQUIRE(t.val(robust.total)(0, 0) == t.val(standard.total)(0, 0));
  }

  SECTION("difference from w=0 is exactly w times the penalty") {
    const TapedLoss<double> at0 = robust_loss(bp, out, task, base_cfg);
    for (double w : {1.0, 10.0, 50.0}) {
      LossConfig cfg_w = base_cfg;
      cfg_w.w_sigma = w;
      const TapedLoss<double> at_w = robust_loss(bp, out, task, cfg_w);
      REQUIRE(at_w.breakdown.total - at0.breakdown.total ==
              w * at_w.breakdown.var_penalty);
      REQUIRE(at_w.breakdown.var_penalty == at0.breakdown.var_penalty);
    }
  }

  SECTION("loss reads target values only under target-only recon") {
    TaskBatch perturbed = task;
    perturbed.ctx.y.array() += 100.0;  // loss must not look at ctx values
    const double a = robust_loss(bp, out, task, base_cfg).breakdown.total;
    const double b = robust_loss(bp, out, perturbed, base_cfg).breakdown.total;
    REQUIRE(a == b);
  }
}

TEST_CASE("training losses pass finite-difference checks on tiny models") {
  const TaskBatch task = tiny_task(2, 3, 2, 0.6, 59);
  ModelConfig cfg = tiny_config();
  cfg.backbone.hidden_dim = 8;
  cfg.backbone.n_heads = 2;
  cfg.backbone.depth_enc = 2;
  cfg.z_dim = 4;

  auto check_variant = [&](const char* name, const LossConfig& lcfg,
                           bool include_ctx) {
    const ModelVariant v = ModelVariant::parse(name);
    ParamStore<double> params;
    Rng init(61);
    init_model(params, v, cfg, init);
    auto loss = [&](ParamStore<double>& ps, bool with_grad) {
      Tape<double> t(with_grad);
      BoundParams<double> bp(t, ps);
      Rng fwd(67);  // frozen eps stream per evaluation
      const auto out = forward(bp, v, cfg, task, lcfg.k_train, fwd,
                               Phase::train, include_ctx);
      const TapedLoss<double> l = training_loss(bp, v, out, task, lcfg);
      if (with_grad) {
        t.backward(l.total);
        bp.harvest_grads();
      }
      return static_cast<double>(t.val(l.total)(0, 0));
    };
    return grad_check(params, loss, 1e-5, /*max_coords_per_tensor=*/12,
                      /*subset_seed=*/71);
  };

  LossConfig standard;
  standard.include_context_in_recon = true;
  REQUIRE(check_variant("np", standard, true) < 1e-4);
  REQUIRE(check_variant("cnp", standard, true) < 1e-4);

  LossConfig robust0;
  robust0.include_context_in_recon = false;
  robust0.w_sigma = 0.0;
  REQUIRE(check_variant("r-anp", robust0, false) < 1e-4);

  LossConfig robust10 = robust0;
  robust10.w_sigma = 10.0;
  REQUIRE(check_variant("r-anp", robust10, false) < 1e-4);
}

TEST_CASE("loss decomposition holds after real training steps, no NaNs") {
  for (const char* name : {"np", "cnp", "anp", "r-anp", "bnp", "banp"}) {
    TaskConfig tcfg;
    tcfg.batch = 4;
    tcfg.noise = NoiseSpec::level(0.6);
    ModelConfig mcfg = tiny_config();
    LossConfig lcfg;
    if (ModelVariant::parse(name).robust) {
      lcfg.include_context_in_recon = false;
      lcfg.w_sigma = 10.0;
    }
    TrainConfig trcfg;
    trcfg.steps = 5;
    trcfg.seed = 3;
    Trainer<float> trainer(ModelVariant::parse(name), mcfg, tcfg, Setup::three,
                           lcfg, trcfg);
    trainer.run([&](long, const LossBreakdown& lb) {
      REQUIRE(std::isfinite(lb.total));
      REQUIRE(lb.kl >= -1e-8);
      REQUIRE(lb.total ==
              Approx(lb.recon_nll + lb.kl + lb.w_sigma * lb.var_penalty)
                  .margin(1e-8));
    });
  }
}

TEST_CASE("losses stay finite across noise levels") {
  const ModelConfig cfg = tiny_config();
  const ModelVariant v = ModelVariant::parse("r-anp");
  ParamStore<double> params;
  Rng init(73);
  init_model(params, v, cfg, init);
  LossConfig lcfg;
  lcfg.include_context_in_recon = false;
  lcfg.w_sigma = 10.0;
  Rng task_rng(79);
  for (double level : {0.0, 0.3, 0.6, 0.99}) {
    TaskConfig tcfg;
    tcfg.batch = 8;
    tcfg.noise = NoiseSpec::level(level);
    for (int rep = 0; rep < 30; ++rep) {
      const TaskBatch task = make_task(tcfg, Setup::three, Phase::train, task_rng);
      Tape<double> t(false);
      BoundParams<double> bp(t, params);
      Rng fwd(83);
      const auto out = forward(bp, v, cfg, task, 1, fwd, Phase::train, false);
      const TapedLoss<double> loss = robust_loss(bp, out, task, lcfg);
      REQUIRE(std::isfinite(loss.breakdown.total));
      REQUIRE(std::isfinite(loss.breakdown.recon_nll));
      REQUIRE(std::isfinite(loss.breakdown.kl));
      REQUIRE(std::isfinite(loss.breakdown.var_penalty));
    }
  }
}
