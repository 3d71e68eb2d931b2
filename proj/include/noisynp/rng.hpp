#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace noisynp {

// Deterministic random source. mt19937_64 is fully specified by the
// standard, so identical seeds give identical streams on every platform.
// Distribution shaping is done by hand (std:: distributions are
// implementation-defined); uniforms come from the top 53 bits and normals
// from a non-caching Box-Muller, which keeps the engine the only state.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform on [lo, hi). Degenerate ranges return lo.
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on {lo, ..., hi} inclusive.
  long uniform_int(long lo, long hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<long>(engine_() % span);
  }

  // Standard normal via Box-Muller; two engine draws per sample, no spare.
  double normal() {
    const double u1 =
        (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // First k entries of a Fisher-Yates shuffle of {0..n-1}; k <= n.
  std::vector<long> sample_without_replacement(long n, long k) {
    std::vector<long> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (long i = 0; i < k; ++i) {
      const long j = i + uniform_int(0, n - 1 - i);
      std::swap(idx[static_cast<std::size_t>(i)],
                idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
  }

  // Derive an independent child stream; used to give each task/run its own
  // generator without coupling draw counts.
  Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ull); }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace noisynp
