#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace noisynp {

// Row-major throughout: rows are set elements, columns are feature dims.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Matf = Mat<float>;
using Vecd = Vec<double>;

// Error taxonomy; the CLI maps these onto distinct exit codes.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Round half to even, used for the noise-count contract round(r*n).
inline long round_half_even(double x) {
  const double fl = std::floor(x);
  const double frac = x - fl;
  if (frac > 0.5) return static_cast<long>(fl) + 1;
  if (frac < 0.5) return static_cast<long>(fl);
  const long lo = static_cast<long>(fl);
  return (lo % 2 == 0) ? lo : lo + 1;
}

template <class S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

}  // namespace noisynp
