#pragma once

#include <cmath>
#include <string>

#include "noisynp/common.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

enum class KernelFamily { rbf, matern52, periodic };

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::rbf: return "rbf";
    case KernelFamily::matern52: return "matern52";
    case KernelFamily::periodic: return "periodic";
  }
  return "?";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "rbf") return KernelFamily::rbf;
  if (s == "matern52" || s == "matern") return KernelFamily::matern52;
  if (s == "periodic") return KernelFamily::periodic;
  throw ConfigError("unknown kernel family: " + s);
}

// Hyperparameter ranges for one function family. Values are drawn
// uniformly on [low, high); a degenerate range pins the parameter.
struct KernelSpec {
  KernelFamily family = KernelFamily::rbf;
  double length_scale_lo = 0.6, length_scale_hi = 1.0;
  double output_scale_lo = 0.1, output_scale_hi = 1.0;
  double period_lo = 0.8, period_hi = 1.2;  // periodic only

  void validate() const {
    auto bad = [](double lo, double hi) { return !(lo > 0) || lo > hi; };
    if (bad(length_scale_lo, length_scale_hi) ||
        bad(output_scale_lo, output_scale_hi) ||
        (family == KernelFamily::periodic && bad(period_lo, period_hi))) {
      throw ConfigError("kernel spec ranges must be positive with lo <= hi");
    }
  }
};

struct KernelParams {
  KernelFamily family = KernelFamily::rbf;
  double length_scale = 1.0;
  double output_scale = 1.0;
  double period = 1.0;  // periodic only
};

inline KernelParams sample_kernel_params(const KernelSpec& spec, Rng& rng) {
  spec.validate();
  KernelParams p;
  p.family = spec.family;
  p.length_scale = rng.uniform(spec.length_scale_lo, spec.length_scale_hi);
  p.output_scale = rng.uniform(spec.output_scale_lo, spec.output_scale_hi);
  if (spec.family == KernelFamily::periodic) {
    p.period = rng.uniform(spec.period_lo, spec.period_hi);
  }
  return p;
}

inline double kernel_value(const KernelParams& p, double dist) {
  const double s2 = p.output_scale * p.output_scale;
  switch (p.family) {
    case KernelFamily::rbf: {
      const double r = dist / p.length_scale;
      return s2 * std::exp(-0.5 * r * r);
    }
    case KernelFamily::matern52: {
      const double r = std::sqrt(5.0) * dist / p.length_scale;
      return s2 * (1.0 + r + r * r / 3.0) * std::exp(-r);
    }
    case KernelFamily::periodic: {
      const double sp = std::sin(3.14159265358979323846 * dist / p.period);
      return s2 * std::exp(-2.0 * sp * sp /
                           (p.length_scale * p.length_scale));
    }
  }
  return 0.0;
}

// Gram matrix over the rows of xs (each row one input point).
inline Matd gram_matrix(const KernelParams& p, const Matd& xs) {
  const long n = xs.rows();
  Matd k(n, n);
  for (long i = 0; i < n; ++i) {
    k(i, i) = kernel_value(p, 0.0);
    for (long j = 0; j < i; ++j) {
      const double d = (xs.row(i) - xs.row(j)).norm();
      k(i, j) = k(j, i) = kernel_value(p, d);
    }
  }
  return k;
}

// Cholesky with jitter escalation: start at 1e-5 * sigma_f^2, escalate
// x10 up to 1e-2 * sigma_f^2, then give up. With try_exact_first the
// first attempt adds no jitter (exact solves for the posterior oracle).
inline Eigen::LLT<Matd> chol_with_jitter(const Matd& k, double output_scale,
                                         bool try_exact_first = false) {
  const double s2 = output_scale * output_scale;
  if (try_exact_first) {
    Eigen::LLT<Matd> llt(k);
    if (llt.info() == Eigen::Success) return llt;
  }
  for (double jitter = 1e-5 * s2; jitter <= 1e-2 * s2 * 1.0000001;
       jitter *= 10.0) {
    Matd kj = k;
    kj.diagonal().array() += jitter;
    Eigen::LLT<Matd> llt(kj);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericError("gram matrix factorization failed after jitter escalation");
}

// Jitter baked into every function draw; the generating joint is
// N(0, K + kSampleJitter * sigma_f^2 * I).
inline constexpr double kSampleJitter = 1e-5;

// Draw from N(0, K + jitter I) at the given inputs.
inline Vecd sample_function(const KernelParams& p, const Matd& xs, Rng& rng) {
  const long n = xs.rows();
  if (n < 1) throw ConfigError("sample_function needs at least one point");
  const Matd k = gram_matrix(p, xs);
  const Eigen::LLT<Matd> llt = chol_with_jitter(k, p.output_scale);
  Vecd z(n);
  for (long i = 0; i < n; ++i) z(i) = rng.normal();
  return llt.matrixL() * z;
}

}  // namespace noisynp
