#pragma once

#include <optional>
#include <string>
#include <vector>

#include "noisynp/nn.hpp"
#include "noisynp/params.hpp"
#include "noisynp/tasks.hpp"

namespace noisynp {

enum class VariantId { np, cnp, anp, canp, bnp, banp };

// Model family member. The robust flag selects the training loss only; it
// never changes the forward architecture.
struct ModelVariant {
  VariantId id = VariantId::np;
  bool robust = false;

  bool has_latent() const {
    return id == VariantId::np || id == VariantId::anp || id == VariantId::bnp;
  }
  bool attention_based() const {
    return id == VariantId::anp || id == VariantId::canp ||
           id == VariantId::banp;
  }
  bool bootstrapped() const {
    return id == VariantId::bnp || id == VariantId::banp;
  }

  std::string name() const {
    static const char* base[] = {"np", "cnp", "anp", "canp", "bnp", "banp"};
    std::string n = base[static_cast<int>(id)];
    return robust ? "r-" + n : n;
  }

  static ModelVariant parse(const std::string& s) {
    ModelVariant v;
    std::string body = s;
    if (body.rfind("r-", 0) == 0) {
      v.robust = true;
      body = body.substr(2);
    }
    if (body == "np") v.id = VariantId::np;
    else if (body == "cnp") v.id = VariantId::cnp;
    else if (body == "anp") v.id = VariantId::anp;
    else if (body == "canp") v.id = VariantId::canp;
    else if (body == "bnp") v.id = VariantId::bnp;
    else if (body == "banp") v.id = VariantId::banp;
    else throw ConfigError("unknown model variant: " + s);
    return v;
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  long z_dim = 128;
  long x_dim = 1;
  long y_dim = 1;
  long train_bootstrap = 4;  // resampled members per training step
  long eval_bootstrap = 50;  // members at evaluation, matches K_eval budget

  void validate() const {
    backbone.validate();
    if (z_dim < 1 || x_dim < 1 || y_dim < 1)
      throw ConfigError("model dims must be >= 1");
    if (train_bootstrap < 1 || eval_bootstrap < 1)
      throw ConfigError("bootstrap member counts must be >= 1");
  }

  std::vector<long> det_dims() const {
    return mlp_dims(x_dim + y_dim, backbone.hidden_dim, backbone.hidden_dim,
                    backbone.depth_enc);
  }
  std::vector<long> qk_dims() const {
    return mlp_dims(x_dim, backbone.hidden_dim, backbone.hidden_dim, 2);
  }
  std::vector<long> lat_dims() const {
    return mlp_dims(x_dim + y_dim, backbone.hidden_dim, backbone.hidden_dim,
                    backbone.depth_enc);
  }
  std::vector<long> lat_head_dims() const {
    return mlp_dims(backbone.hidden_dim, backbone.hidden_dim, 2 * z_dim, 2);
  }
  long cond_dim(ModelVariant v) const {
    long d = 0;
    if (v.id != VariantId::np && v.id != VariantId::bnp)
      d += backbone.hidden_dim;  // pooled or cross-attention readout
    if (v.has_latent()) d += z_dim;
    return d;
  }
  std::vector<long> dec_dims(ModelVariant v) const {
    return mlp_dims(x_dim + cond_dim(v), backbone.hidden_dim, 2 * y_dim,
                    backbone.depth_dec);
  }
};

template <class S>
void init_model(ParamStore<S>& params, ModelVariant v, const ModelConfig& cfg,
                Rng& rng) {
  cfg.validate();
  init_mlp(params, "det", cfg.det_dims(), rng);
  params.add("null_ctx", 1, cfg.backbone.hidden_dim);
  if (v.attention_based()) {
    init_mlp(params, "qk", cfg.qk_dims(), rng);
    init_attention(params, "attn", cfg.backbone.hidden_dim, rng);
  }
  if (v.has_latent()) {
    init_mlp(params, "lat", cfg.lat_dims(), rng);
    init_mlp(params, "lat_head", cfg.lat_head_dims(), rng);
    params.add("lat_prior", 1, 2 * cfg.z_dim);
  }
  init_mlp(params, "dec", cfg.dec_dims(v), rng);
}

template <class S>
struct LatentDist {
  Value<S> mean;  // [B, z_dim]
  Value<S> std;   // [B, z_dim], >= sigma_floor
};

template <class S>
struct Pred {
  Value<S> mean;  // [B*n_query, y_dim]
  Value<S> std;   // [B*n_query, y_dim], >= sigma_floor
};

// Context representation: the pooled vector for context-averaging models,
// or the per-point embeddings plus raw positions for attention readout.
template <class S>
struct ContextRepr {
  bool attention = false;
  bool empty = false;
  long batch = 0;
  long n_ctx = 0;
  Value<S> pooled;  // [B, h]
  Value<S> values;  // [B*n_ctx, h] (attention path)
  Value<S> ctx_x;   // [B*n_ctx, x_dim] leaf (attention path)
};

template <class S>
ContextRepr<S> encode_context(BoundParams<S>& p, ModelVariant v,
                              const ModelConfig& cfg, const Matd& ctx_x,
                              const Matd& ctx_y, long batch) {
  Tape<S>& t = p.tape();
  ContextRepr<S> repr;
  repr.attention = v.attention_based();
  repr.batch = batch;
  repr.n_ctx = ctx_x.rows() / std::max<long>(batch, 1);
  if (ctx_x.rows() == 0) {
    repr.empty = true;
    repr.pooled = t.repeat_rows(p("null_ctx"), batch);
    return repr;
  }
  Value<S> x = t.leaf(ctx_x.cast<S>());
  Value<S> y = t.leaf(ctx_y.cast<S>());
  Value<S> embed = mlp_apply(p, "det", cfg.det_dims(),
                             cfg.backbone.activation, t.concat_cols({x, y}));
  repr.pooled = t.block_mean_rows(embed, batch);
  if (repr.attention) {
    repr.values = embed;
    repr.ctx_x = x;
  }
  return repr;
}

// Per-query conditioning vector from the context: cross-attention readout
// for attention models, broadcast pooled vector otherwise. query_x is the
// flattened [B*m, x_dim] leaf.
template <class S>
Value<S> context_readout(BoundParams<S>& p, const ModelConfig& cfg,
                         const ContextRepr<S>& repr, Value<S> query_x,
                         long m) {
  Tape<S>& t = p.tape();
  if (repr.empty) return t.repeat_rows(p("null_ctx"), repr.batch * m);
  if (!repr.attention) return t.repeat_rows(repr.pooled, m);
  Value<S> queries = mlp_apply(p, "qk", cfg.qk_dims(),
                               cfg.backbone.activation, query_x);
  Value<S> keys = mlp_apply(p, "qk", cfg.qk_dims(), cfg.backbone.activation,
                            repr.ctx_x);
  return multihead_cross_attention(p, "attn", cfg.backbone.n_heads, queries,
                                   keys, repr.values, repr.batch);
}

// Mean-pooled set encoding mapped to a diagonal Gaussian over z. The same
// network serves q (applied to context+target) and p (context only); an
// empty set falls back to the learned prior.
template <class S>
LatentDist<S> encode_latent(BoundParams<S>& p, const ModelConfig& cfg,
                            const Matd& x, const Matd& y, long batch) {
  Tape<S>& t = p.tape();
  LatentDist<S> dist;
  if (x.rows() == 0) {
    Value<S> prior = t.repeat_rows(p("lat_prior"), batch);
    dist.mean = t.slice_cols(prior, 0, cfg.z_dim);
    dist.std = positive_transform(t, t.slice_cols(prior, cfg.z_dim, cfg.z_dim),
                                  cfg.backbone.sigma_floor);
    return dist;
  }
  Value<S> xv = t.leaf(x.cast<S>());
  Value<S> yv = t.leaf(y.cast<S>());
  Value<S> embed = mlp_apply(p, "lat", cfg.lat_dims(), cfg.backbone.activation,
                             t.concat_cols({xv, yv}));
  Value<S> pooled = t.block_mean_rows(embed, batch);
  Value<S> head = mlp_apply(p, "lat_head", cfg.lat_head_dims(),
                            cfg.backbone.activation, pooled);
  dist.mean = t.slice_cols(head, 0, cfg.z_dim);
  dist.std = positive_transform(t, t.slice_cols(head, cfg.z_dim, cfg.z_dim),
                                cfg.backbone.sigma_floor);
  return dist;
}

namespace detail {

// Decoder on a precomputed readout; predictions are pointwise in the
// query, so target t sees only (x_t, readout_t, z).
template <class S>
Pred<S> decode_with(BoundParams<S>& p, ModelVariant v, const ModelConfig& cfg,
                    std::type_identity_t<std::optional<Value<S>>> readout,
                    std::type_identity_t<std::optional<Value<S>>> z,
                    std::type_identity_t<Value<S>> query_x, long m) {
  Tape<S>& t = p.tape();
  std::vector<Value<S>> parts{query_x};
  if (readout) parts.push_back(*readout);
  if (z) parts.push_back(t.repeat_rows(*z, m));
  Value<S> out = mlp_apply(p, "dec", cfg.dec_dims(v),
                           cfg.backbone.activation, t.concat_cols(parts));
  Pred<S> pred;
  pred.mean = t.slice_cols(out, 0, cfg.y_dim);
  pred.std = positive_transform(t, t.slice_cols(out, cfg.y_dim, cfg.y_dim),
                                cfg.backbone.sigma_floor);
  return pred;
}

}  // namespace detail

template <class S>
Pred<S> decode(BoundParams<S>& p, ModelVariant v, const ModelConfig& cfg,
               const ContextRepr<S>& repr, std::optional<Value<S>> z,
               Value<S> query_x, long m) {
  std::optional<Value<S>> readout;
  if (v.id != VariantId::np && v.id != VariantId::bnp)
    readout = context_readout(p, cfg, repr, query_x, m);
  return detail::decode_with(p, v, cfg, readout, z, query_x, m);
}

// With-replacement resample of a single task's context, same cardinality.
inline std::vector<PointSet> bootstrap_contexts(const PointSet& ctx, long members,
                                                Rng& rng) {
  if (ctx.size() == 0) throw ConfigError("bootstrap_contexts: empty context");
  if (members < 1) throw ConfigError("bootstrap_contexts: members must be >= 1");
  std::vector<PointSet> out;
  out.reserve(static_cast<std::size_t>(members));
  const long n = ctx.size();
  for (long b = 0; b < members; ++b) {
    PointSet ps;
    ps.x.resize(n, ctx.x.cols());
    ps.y.resize(n, ctx.y.cols());
    for (long i = 0; i < n; ++i) {
      const long j = rng.uniform_int(0, n - 1);
      ps.x.row(i) = ctx.x.row(j);
      ps.y.row(i) = ctx.y.row(j);
    }
    out.push_back(std::move(ps));
  }
  return out;
}

namespace detail {

// Batched member resample: per-task with-replacement redraws of the
// flattened context rows.
inline void resample_ctx_batch(const TaskBatch& task, Rng& rng, Matd& x,
                               Matd& y) {
  const long B = task.batch, n = task.n_ctx;
  x.resize(B * n, task.ctx.x.cols());
  y.resize(B * n, task.ctx.y.cols());
  for (long b = 0; b < B; ++b) {
    for (long i = 0; i < n; ++i) {
      const long j = b * n + rng.uniform_int(0, n - 1);
      x.row(b * n + i) = task.ctx.x.row(j);
      y.row(b * n + i) = task.ctx.y.row(j);
    }
  }
}

// Per-task vstack of context and target rows, flattened back to
// [B*(n_ctx+n_tar), d].
inline Matd stack_union(const Matd& ctx, const Matd& tar, long B, long n_ctx,
                        long n_tar) {
  Matd out(B * (n_ctx + n_tar), ctx.cols());
  for (long b = 0; b < B; ++b) {
    out.middleRows(b * (n_ctx + n_tar), n_ctx) = ctx.middleRows(b * n_ctx, n_ctx);
    out.middleRows(b * (n_ctx + n_tar) + n_ctx, n_tar) =
        tar.middleRows(b * n_tar, n_tar);
  }
  return out;
}

}  // namespace detail

template <class S>
struct ModelOutput {
  std::vector<Pred<S>> predictions;  // K (latent), 1 (deterministic),
                                     // 1 + members (bootstrap, [0] = base)
  bool has_latent = false;
  LatentDist<S> q, p;                        // np / anp / bnp base path
  std::vector<LatentDist<S>> member_q, member_p;  // bnp members
  bool bootstrapped = false;
  long batch = 0;
  long n_query = 0;  // per-task query rows
  bool query_includes_ctx = false;
  long K = 1;
};

// Full forward pass for training and generation. Training draws z by
// reparameterization from q(z | context+target); generation/eval forward
// draws from p(z | context). The importance-sampled evaluator in eval.hpp
// drives encode/decode directly instead of using this entry point.
template <class S>
ModelOutput<S> forward(BoundParams<S>& p, ModelVariant v,
                       const ModelConfig& cfg, const TaskBatch& task, long K,
                       Rng& rng, Phase phase,
                       bool include_ctx_in_query = false) {
  if (K < 1) throw ConfigError("forward: K must be >= 1");
  Tape<S>& t = p.tape();
  const long B = task.batch;

  ModelOutput<S> out;
  out.batch = B;
  out.bootstrapped = v.bootstrapped();
  out.has_latent = v.has_latent();
  out.query_includes_ctx = include_ctx_in_query;
  out.n_query = include_ctx_in_query ? task.n_ctx + task.n_tar : task.n_tar;

  Matd query_x = include_ctx_in_query
                     ? detail::stack_union(task.ctx.x, task.tar.x, B,
                                           task.n_ctx, task.n_tar)
                     : task.tar.x;
  Value<S> query = t.leaf(query_x.cast<S>());

  ContextRepr<S> repr =
      encode_context(p, v, cfg, task.ctx.x, task.ctx.y, B);
  std::optional<Value<S>> readout;
  if (v.id != VariantId::np && v.id != VariantId::bnp)
    readout = context_readout(p, cfg, repr, query, out.n_query);

  auto draw_z = [&](const LatentDist<S>& dist) {
    Mat<S> eps(B, cfg.z_dim);
    for (long i = 0; i < B; ++i)
      for (long j = 0; j < cfg.z_dim; ++j)
        eps(i, j) = static_cast<S>(rng.normal());
    return t.add(dist.mean, t.mul(dist.std, t.leaf(std::move(eps))));
  };

  if (!v.has_latent() && !v.bootstrapped()) {  // cnp, canp
    out.K = 1;
    out.predictions.push_back(
        detail::decode_with(p, v, cfg, readout, std::nullopt, query, out.n_query));
    return out;
  }

  if (v.has_latent()) {
    const Matd ux = detail::stack_union(task.ctx.x, task.tar.x, B, task.n_ctx,
                                        task.n_tar);
    const Matd uy = detail::stack_union(task.ctx.y, task.tar.y, B, task.n_ctx,
                                        task.n_tar);
    out.q = encode_latent(p, cfg, ux, uy, B);
    out.p = encode_latent(p, cfg, task.ctx.x, task.ctx.y, B);
  }

  if (!v.bootstrapped()) {  // np, anp
    out.K = K;
    for (long k = 0; k < K; ++k) {
      Value<S> z = draw_z(phase == Phase::train ? out.q : out.p);
      out.predictions.push_back(
          detail::decode_with(p, v, cfg, readout, z, query, out.n_query));
    }
    return out;
  }

  // bnp, banp: base path plus resampled members.
  out.K = 1;
  std::optional<Value<S>> base_z;
  if (v.has_latent())
    base_z = draw_z(phase == Phase::train ? out.q : out.p);
  out.predictions.push_back(
      detail::decode_with(p, v, cfg, readout, base_z, query, out.n_query));

  const long members =
      (task.n_ctx == 0)
          ? 0
          : (phase == Phase::train ? cfg.train_bootstrap : cfg.eval_bootstrap);
  for (long m = 0; m < members; ++m) {
    Matd mx, my;
    detail::resample_ctx_batch(task, rng, mx, my);
    ContextRepr<S> mrepr = encode_context(p, v, cfg, mx, my, B);
    std::optional<Value<S>> mreadout;
    std::optional<Value<S>> mz;
    if (v.id == VariantId::banp)
      mreadout = context_readout(p, cfg, mrepr, query, out.n_query);
    if (v.has_latent()) {  // bnp
      const Matd ux =
          detail::stack_union(mx, task.tar.x, B, task.n_ctx, task.n_tar);
      const Matd uy =
          detail::stack_union(my, task.tar.y, B, task.n_ctx, task.n_tar);
      LatentDist<S> mq = encode_latent(p, cfg, ux, uy, B);
      LatentDist<S> mp = encode_latent(p, cfg, mx, my, B);
      mz = draw_z(phase == Phase::train ? mq : mp);
      out.member_q.push_back(mq);
      out.member_p.push_back(mp);
    }
    out.predictions.push_back(
        detail::decode_with(p, v, cfg, mreadout, mz, query, out.n_query));
  }
  return out;
}

}  // namespace noisynp
