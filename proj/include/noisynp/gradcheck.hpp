#pragma once

#include <algorithm>
#include <functional>

#include "noisynp/common.hpp"
#include "noisynp/params.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

// Central finite differences against analytic gradients, in double.
//
// `loss` evaluates the objective; with with_grad=true it must also
// accumulate analytic gradients into params.grad (params.zero_grads() is
// called here first). Checks every coordinate unless max_coords_per_tensor
// caps it, in which case a seeded subset is sampled. Returns the max
// relative discrepancy |a - n| / max(|a| + |n|, 1e-6).
inline double grad_check(
    ParamStore<double>& params,
    const std::function<double(ParamStore<double>&, bool)>& loss,
    double epsilon, long max_coords_per_tensor = -1,
    std::uint64_t subset_seed = 0) {
  params.zero_grads();
  loss(params, /*with_grad=*/true);

  double max_rel = 0.0;
  Rng rng(subset_seed);
  for (const auto& name : params.names()) {
    auto& t = params.at(name);
    const long total = t.value.size();
    std::vector<long> coords;
    if (max_coords_per_tensor > 0 && total > max_coords_per_tensor) {
      coords = rng.sample_without_replacement(total, max_coords_per_tensor);
    } else {
      coords.resize(static_cast<std::size_t>(total));
      for (long i = 0; i < total; ++i) coords[static_cast<std::size_t>(i)] = i;
    }
    for (long flat : coords) {
      double* ptr = t.value.data() + flat;
      const double saved = *ptr;
      *ptr = saved + epsilon;
      const double up = loss(params, false);
      *ptr = saved - epsilon;
      const double dn = loss(params, false);
      *ptr = saved;
      const double numeric = (up - dn) / (2.0 * epsilon);
      const double analytic = *(t.grad.data() + flat);
      const double rel = std::abs(analytic - numeric) /
                         std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace noisynp
