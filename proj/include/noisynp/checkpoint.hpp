#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "noisynp/common.hpp"
#include "noisynp/params.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

// Versioned binary container: magic, config echo, named tensor table
// (value + Adam moments per tensor, raw little-endian), optimizer step,
// global step and both RNG states. Writes go through a temp file and an
// atomic rename so a crash never leaves a torn checkpoint behind.
inline constexpr std::uint32_t kCheckpointMagic = 0x4b43504e;  // "NPCK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated read");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("checkpoint: truncated string");
  return s;
}

template <class S>
void write_mat(std::ostream& os, const Mat<S>& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(S) * m.size()));
}

template <class S>
void read_mat(std::istream& is, Mat<S>& m) {
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(S) * m.size()));
  if (!is) throw IoError("checkpoint: truncated tensor data");
}

}  // namespace detail

template <class S>
struct Checkpoint {
  std::string config_json;
  long global_step = 0;
  long opt_step = 0;
  std::string data_rng_state;
  std::string model_rng_state;
  ParamStore<S> params;
};

template <class S>
void save_checkpoint(const std::string& path, const ParamStore<S>& params,
                     long global_step, long opt_step, const Rng& data_rng,
                     const Rng& model_rng, const std::string& config_json) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + tmp.string());
    detail::write_pod(os, kCheckpointMagic);
    detail::write_pod(os, kCheckpointVersion);
    detail::write_string(os, config_json);
    detail::write_pod<std::int64_t>(os, global_step);
    detail::write_pod<std::int64_t>(os, opt_step);
    detail::write_string(os, data_rng.serialize());
    detail::write_string(os, model_rng.serialize());
    detail::write_pod<std::uint32_t>(os, sizeof(S) == 4 ? 0u : 1u);
    detail::write_pod<std::uint64_t>(os, params.names().size());
    for (const auto& name : params.names()) {
      const auto& t = params.at(name);
      detail::write_string(os, name);
      detail::write_pod<std::int64_t>(os, t.value.rows());
      detail::write_pod<std::int64_t>(os, t.value.cols());
      detail::write_mat(os, t.value);
      detail::write_mat(os, t.m);
      detail::write_mat(os, t.v);
    }
    if (!os) throw IoError("checkpoint write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  if (detail::read_pod<std::uint32_t>(is) != kCheckpointMagic)
    throw IoError("not a checkpoint file (bad magic): " + path);
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version in " + path);
  Checkpoint<S> ck;
  ck.config_json = detail::read_string(is);
  ck.global_step = static_cast<long>(detail::read_pod<std::int64_t>(is));
  ck.opt_step = static_cast<long>(detail::read_pod<std::int64_t>(is));
  ck.data_rng_state = detail::read_string(is);
  ck.model_rng_state = detail::read_string(is);
  const auto dtype = detail::read_pod<std::uint32_t>(is);
  if (dtype != (sizeof(S) == 4 ? 0u : 1u))
    throw IoError("checkpoint dtype mismatch in " + path);
  const auto count = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::read_string(is);
    const auto rows = detail::read_pod<std::int64_t>(is);
    const auto cols = detail::read_pod<std::int64_t>(is);
    auto& t = ck.params.add(name, rows, cols);
    detail::read_mat(is, t.value);
    detail::read_mat(is, t.m);
    detail::read_mat(is, t.v);
  }
  return ck;
}

}  // namespace noisynp
