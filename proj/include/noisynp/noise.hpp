#pragma once

#include <utility>
#include <vector>

#include "noisynp/common.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

// Gaussian contamination: std `s` plus a rate `r` giving the fraction of
// points hit. In coupled mode the single "noise level" sets both (r = s).
struct NoiseSpec {
  double std = 0.0;
  double rate = 0.0;
  bool coupled = true;

  static NoiseSpec level(double s) {
    NoiseSpec n;
    n.std = s;
    n.rate = s;
    n.coupled = true;
    return n;
  }

  static NoiseSpec decoupled(double s, double r) {
    NoiseSpec n;
    n.std = s;
    n.rate = r;
    n.coupled = false;
    return n;
  }

  void validate() const {
    if (std < 0.0) throw ConfigError("noise std must be >= 0");
    if (rate < 0.0 || rate > 1.0) throw ConfigError("noise rate must be in [0,1]");
    if (coupled && (std > 1.0 || std != rate)) {
      throw ConfigError("coupled noise requires r == s and s in [0,1]");
    }
  }
};

// Adds N(0, s^2) to exactly round(r*n) uniformly chosen entries (round half
// to even, chosen without replacement). Returns the noised copy and the mask
// of hit indices. Unmasked entries are bit-identical to the input.
inline std::pair<Vecd, std::vector<bool>> inject_noise(const Vecd& y,
                                                       const NoiseSpec& noise,
                                                       Rng& rng) {
  noise.validate();
  const long n = y.size();
  Vecd out = y;
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  const long count = round_half_even(noise.rate * static_cast<double>(n));
  if (count == 0) return {out, mask};
  const std::vector<long> hit = rng.sample_without_replacement(n, count);
  for (long idx : hit) {
    if (noise.std > 0.0) out(idx) += rng.normal(0.0, noise.std);
    mask[static_cast<std::size_t>(idx)] = true;
  }
  return {out, mask};
}

}  // namespace noisynp
