#pragma once

#include <string>
#include <vector>

#include "noisynp/autodiff.hpp"
#include "noisynp/common.hpp"
#include "noisynp/params.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

enum class Activation { relu, tanh };

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation: " + s);
}

inline std::string to_string(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

struct BackboneConfig {
  long hidden_dim = 128;
  long depth_enc = 4;
  long depth_dec = 3;
  long n_heads = 8;
  Activation activation = Activation::relu;
  double sigma_floor = 0.1;

  void validate() const {
    if (hidden_dim < 1 || depth_enc < 1 || depth_dec < 1 || n_heads < 1)
      throw ConfigError("backbone dims must be >= 1");
    if (hidden_dim % n_heads != 0)
      throw ConfigError("hidden_dim must be divisible by n_heads");
    if (!(sigma_floor > 0)) throw ConfigError("sigma_floor must be > 0");
  }
};

// Affine stack: `dims` lists layer widths from input to output, so `depth`
// affine layers means dims.size() == depth + 1. Activation between layers,
// none after the last.
inline std::vector<long> mlp_dims(long in, long hidden, long out, long depth) {
  std::vector<long> dims;
  dims.push_back(in);
  for (long i = 0; i < depth - 1; ++i) dims.push_back(hidden);
  dims.push_back(out);
  return dims;
}

template <class S>
void init_mlp(ParamStore<S>& params, const std::string& prefix,
              const std::vector<long>& dims, Rng& rng) {
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    init_affine(params, prefix + ".l" + std::to_string(l), dims[l],
                dims[l + 1], rng);
  }
}

template <class S>
Value<S> mlp_apply(BoundParams<S>& p, const std::string& prefix,
                   const std::vector<long>& dims, Activation act,
                   Value<S> input) {
  Tape<S>& t = p.tape();
  if (input.cols() != dims.front())
    throw NumericError("mlp_apply: input width mismatch for " + prefix);
  Value<S> h = input;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::string layer = prefix + ".l" + std::to_string(l);
    h = t.add_row_broadcast(t.matmul(h, p(layer + ".w")), p(layer + ".b"));
    if (l + 2 < dims.size())
      h = (act == Activation::relu) ? t.relu(h) : t.tanh_act(h);
  }
  return h;
}

// sigma = floor + (1 - floor) * softplus(raw): strictly above the floor,
// smooth and monotone in raw.
template <class S>
Value<S> positive_transform(Tape<S>& t, Value<S> raw, double sigma_floor) {
  return t.add_scalar(
      t.scale(t.softplus(raw), static_cast<S>(1.0 - sigma_floor)),
      static_cast<S>(sigma_floor));
}

template <class S>
void init_attention(ParamStore<S>& params, const std::string& prefix, long d,
                    Rng& rng) {
  init_affine(params, prefix + ".q", d, d, rng);
  init_affine(params, prefix + ".k", d, d, rng);
  init_affine(params, prefix + ".v", d, d, rng);
  init_affine(params, prefix + ".o", d, d, rng);
}

// Multi-head cross attention with learned in/out projections. queries and
// keys/values are flattened over `n_blocks` independent tasks.
template <class S>
Value<S> multihead_cross_attention(BoundParams<S>& p, const std::string& prefix,
                                   long heads, Value<S> queries, Value<S> keys,
                                   Value<S> values, long n_blocks) {
  Tape<S>& t = p.tape();
  auto proj = [&](Value<S> x, const std::string& which) {
    return t.add_row_broadcast(t.matmul(x, p(prefix + "." + which + ".w")),
                               p(prefix + "." + which + ".b"));
  };
  Value<S> q = proj(queries, "q");
  Value<S> k = proj(keys, "k");
  Value<S> v = proj(values, "v");
  Value<S> attn = t.attention(q, k, v, n_blocks, heads);
  return proj(attn, "o");
}

}  // namespace noisynp
