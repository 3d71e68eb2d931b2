#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "noisynp/eval.hpp"

namespace noisynp {

// Plot-ready series: one CSV per (figure, series) with x = noise level and
// y = aggregated target log-likelihood. Figures:
//   noise-curves : one series per model (mean +- std over seeds)
//   np-delta     : same, minus the np series (difference vs. the np model)
//   sr-grid      : one series per (model, noise std) over the rate axis
// Writing is deterministic, so re-exporting unchanged results is a no-op
// byte-wise.
inline std::vector<std::string> export_plots(const std::vector<EvalRow>& rows,
                                             const std::string& figure,
                                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<std::string> written;

  struct Stat {
    double sum = 0.0, sumsq = 0.0;
    long n = 0;
    void add(double v) {
      sum += v;
      sumsq += v * v;
      ++n;
    }
    double mean() const { return sum / std::max<long>(n, 1); }
    double sd() const {
      if (n < 2) return 0.0;
      const double m = mean();
      return std::sqrt(std::max(0.0, (sumsq - n * m * m) / (n - 1)));
    }
  };

  auto write_series = [&](const std::string& name,
                          const std::map<double, Stat>& pts) {
    const std::string path = (fs::path(out_dir) / (name + ".csv")).string();
    std::ofstream os(path, std::ios::trunc);
    os << "x,y,std,n\n";
    for (const auto& [x, st] : pts) {
      char line[128];
      std::snprintf(line, sizeof(line), "%.6g,%.10g,%.10g,%ld\n", x, st.mean(),
                    st.sd(), st.n);
      os << line;
    }
    written.push_back(path);
  };

  if (figure == "noise-curves" || figure == "np-delta") {
    std::map<std::string, std::map<double, Stat>> series;
    for (const auto& r : rows) series[r.model][r.noise_s].add(r.target_ll);
    if (figure == "np-delta") {
      auto np = series.find("np");
      if (np == series.end())
        throw ConfigError("np-delta export needs np rows as the baseline");
      std::map<double, double> base;
      for (const auto& [x, st] : np->second) base[x] = st.mean();
      for (auto& [model, pts] : series) {
        std::map<double, Stat> delta;
        for (const auto& [x, st] : pts) {
          if (!base.count(x)) continue;
          Stat s;
          s.add(st.mean() - base.at(x));
          delta[x] = s;
        }
        write_series(figure + "-" + model, delta);
      }
    } else {
      for (auto& [model, pts] : series) write_series(figure + "-" + model, pts);
    }
  } else if (figure == "sr-grid") {
    std::map<std::string, std::map<double, Stat>> series;
    for (const auto& r : rows) {
      char key[96];
      std::snprintf(key, sizeof(key), "%s-s%.4g", r.model.c_str(), r.noise_s);
      series[key][r.noise_r].add(r.target_ll);
    }
    for (auto& [key, pts] : series) write_series(figure + "-" + key, pts);
  } else {
    throw ConfigError("unknown figure id: " + figure);
  }
  std::sort(written.begin(), written.end());
  return written;
}

}  // namespace noisynp
