#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "noisynp/common.hpp"

namespace noisynp {

// Eager reverse-mode tape over dense matrices. Each op computes its value
// immediately and, while recording, registers a pullback that accumulates
// into its parents' gradient slots. This covers exactly the graph shapes
// the NP models need (pointwise stacks, pooling over row blocks,
// cross-attention, scalar reductions); it is not a general autograd.
//
// Values are cheap handles (tape pointer + node index). A tape is used for
// one forward/backward episode and then cleared; with recording off it
// still evaluates eagerly, which gives a single code path for training and
// gradient-free evaluation.
template <class S>
class Tape;

template <class S>
struct Value {
  Tape<S>* tape = nullptr;
  long idx = -1;

  const Mat<S>& val() const;
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
};

template <class S>
class Tape {
 public:
  struct Node {
    Mat<S> val;
    Mat<S> grad;  // allocated only when needs_grad
    bool needs_grad = false;
    std::function<void()> pullback;  // empty for leaves
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  Value<S> leaf(Mat<S> m, bool needs_grad = false) {
    return push(std::move(m), needs_grad && recording_, {});
  }

  const Mat<S>& val(Value<S> v) const { return nodes_[v.idx].val; }
  const Mat<S>& grad(Value<S> v) const { return nodes_[v.idx].grad; }
  Mat<S>& grad_mut(Value<S> v) { return nodes_[v.idx].grad; }
  bool needs_grad(Value<S> v) const { return nodes_[v.idx].needs_grad; }

  // Runs pullbacks from `root` (a 1x1 scalar) down to the leaves.
  void backward(Value<S> root) {
    auto& r = nodes_[root.idx];
    if (!r.needs_grad) return;
    if (r.val.size() != 1) throw NumericError("backward root must be scalar");
    r.grad(0, 0) = S(1);
    for (long i = root.idx; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.needs_grad && n.pullback) n.pullback();
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // ---- ops ----

  Value<S> matmul(Value<S> a, Value<S> b) {
    check_cols(a, val(b).rows(), "matmul");
    Mat<S> out = val(a) * val(b);
    return unary_or_binary(std::move(out), a, b, [this](Value<S> o, Value<S> a, Value<S> b) {
      const Mat<S>& g = grad(o);
      if (needs_grad(a)) grad_mut(a).noalias() += g * val(b).transpose();
      if (needs_grad(b)) grad_mut(b).noalias() += val(a).transpose() * g;
    });
  }

  // Row-broadcast add: a[n,d] + bias[1,d].
  Value<S> add_row_broadcast(Value<S> a, Value<S> bias) {
    Mat<S> out = val(a);
    out.rowwise() += val(bias).row(0);
    return unary_or_binary(std::move(out), a, bias, [this](Value<S> o, Value<S> a, Value<S> b) {
      const Mat<S>& g = grad(o);
      if (needs_grad(a)) grad_mut(a) += g;
      if (needs_grad(b)) grad_mut(b).row(0) += g.colwise().sum();
    });
  }

  Value<S> add(Value<S> a, Value<S> b) {
    check_same_shape(a, b, "add");
    return unary_or_binary(val(a) + val(b), a, b, [this](Value<S> o, Value<S> a, Value<S> b) {
      if (needs_grad(a)) grad_mut(a) += grad(o);
      if (needs_grad(b)) grad_mut(b) += grad(o);
    });
  }

  Value<S> sub(Value<S> a, Value<S> b) {
    check_same_shape(a, b, "sub");
    return unary_or_binary(val(a) - val(b), a, b, [this](Value<S> o, Value<S> a, Value<S> b) {
      if (needs_grad(a)) grad_mut(a) += grad(o);
      if (needs_grad(b)) grad_mut(b) -= grad(o);
    });
  }

  Value<S> mul(Value<S> a, Value<S> b) {
    check_same_shape(a, b, "mul");
    return unary_or_binary(val(a).cwiseProduct(val(b)), a, b,
                           [this](Value<S> o, Value<S> a, Value<S> b) {
      const Mat<S>& g = grad(o);
      if (needs_grad(a)) grad_mut(a) += g.cwiseProduct(val(b));
      if (needs_grad(b)) grad_mut(b) += g.cwiseProduct(val(a));
    });
  }

  Value<S> div(Value<S> a, Value<S> b) {
    check_same_shape(a, b, "div");
    return unary_or_binary(val(a).cwiseQuotient(val(b)), a, b,
                           [this](Value<S> o, Value<S> a, Value<S> b) {
      const Mat<S>& g = grad(o);
      if (needs_grad(a)) grad_mut(a) += g.cwiseQuotient(val(b));
      if (needs_grad(b))
        grad_mut(b) -= g.cwiseProduct(val(o)).cwiseQuotient(val(b));
    });
  }

  Value<S> scale(Value<S> a, S c) {
    return unary(Mat<S>(val(a) * c), a, [this, c](Value<S> o, Value<S> a) {
      grad_mut(a) += grad(o) * c;
    });
  }

  Value<S> add_scalar(Value<S> a, S c) {
    Mat<S> out = val(a);
    out.array() += c;
    return unary(std::move(out), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a) += grad(o);
    });
  }

  Value<S> relu(Value<S> a) {
    return unary(Mat<S>(val(a).cwiseMax(S(0))), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() +=
          grad(o).array() * (val(a).array() > S(0)).template cast<S>();
    });
  }

  Value<S> tanh_act(Value<S> a) {
    return unary(Mat<S>(val(a).array().tanh()), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() += grad(o).array() * (S(1) - val(o).array().square());
    });
  }

  // Numerically stable softplus; pullback is the logistic sigmoid.
  Value<S> softplus(Value<S> a) {
    Mat<S> out = val(a).unaryExpr([](S x) {
      return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    });
    return unary(std::move(out), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() +=
          grad(o).array() * (S(1) / (S(1) + (-val(a).array()).exp()));
    });
  }

  Value<S> exp(Value<S> a) {
    return unary(Mat<S>(val(a).array().exp()), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() += grad(o).array() * val(o).array();
    });
  }

  Value<S> log(Value<S> a) {
    return unary(Mat<S>(val(a).array().log()), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() += grad(o).array() / val(a).array();
    });
  }

  Value<S> square(Value<S> a) {
    return unary(Mat<S>(val(a).array().square()), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() += grad(o).array() * S(2) * val(a).array();
    });
  }

  Value<S> concat_cols(const std::vector<Value<S>>& parts) {
    if (parts.empty()) throw NumericError("concat_cols: empty");
    const long n = val(parts[0]).rows();
    long d = 0;
    for (auto p : parts) {
      if (val(p).rows() != n) throw NumericError("concat_cols: row mismatch");
      d += val(p).cols();
    }
    Mat<S> out(n, d);
    long at = 0;
    for (auto p : parts) {
      out.middleCols(at, val(p).cols()) = val(p);
      at += val(p).cols();
    }
    bool any = recording_ && any_needs_grad(parts);
    Value<S> o = push(std::move(out), any, {});
    if (any) {
      auto ps = parts;
      nodes_[o.idx].pullback = [this, o, ps]() {
        const Mat<S>& g = grad(o);
        long at = 0;
        for (auto p : ps) {
          if (needs_grad(p)) grad_mut(p) += g.middleCols(at, val(p).cols());
          at += val(p).cols();
        }
      };
    }
    return o;
  }

  Value<S> slice_cols(Value<S> a, long start, long count) {
    Mat<S> out = val(a).middleCols(start, count);
    return unary(std::move(out), a, [this, start, count](Value<S> o, Value<S> a) {
      grad_mut(a).middleCols(start, count) += grad(o);
    });
  }

  // [nb*r, d] -> [nb, d], mean over each block of r consecutive rows.
  Value<S> block_mean_rows(Value<S> a, long n_blocks) {
    return block_reduce_rows(a, n_blocks, true);
  }

  // [nb*r, d] -> [nb, d], sum over each block of r consecutive rows.
  Value<S> block_sum_rows(Value<S> a, long n_blocks) {
    return block_reduce_rows(a, n_blocks, false);
  }

  // [nb*r, d] -> [nb*tail, d]: the last `tail` rows of each block.
  Value<S> block_tail_rows(Value<S> a, long n_blocks, long tail) {
    const long n = val(a).rows(), d = val(a).cols();
    if (n % n_blocks != 0) throw NumericError("block tail: bad block count");
    const long r = n / n_blocks;
    if (tail < 0 || tail > r) throw NumericError("block tail: bad tail size");
    Mat<S> out(n_blocks * tail, d);
    for (long b = 0; b < n_blocks; ++b)
      out.middleRows(b * tail, tail) = val(a).middleRows(b * r + (r - tail), tail);
    return unary(std::move(out), a, [this, n_blocks, r, tail](Value<S> o, Value<S> a) {
      const Mat<S>& g = grad(o);
      for (long b = 0; b < n_blocks; ++b)
        grad_mut(a).middleRows(b * r + (r - tail), tail) +=
            g.middleRows(b * tail, tail);
    });
  }

  // [nb, d] -> [nb*reps, d]: row b expanded to rows [b*reps, (b+1)*reps).
  Value<S> repeat_rows(Value<S> a, long reps) {
    const long nb = val(a).rows(), d = val(a).cols();
    Mat<S> out(nb * reps, d);
    for (long b = 0; b < nb; ++b)
      out.middleRows(b * reps, reps).rowwise() = val(a).row(b);
    return unary(std::move(out), a, [this, reps](Value<S> o, Value<S> a) {
      const Mat<S>& g = grad(o);
      for (long b = 0; b < val(a).rows(); ++b)
        grad_mut(a).row(b) += g.middleRows(b * reps, reps).colwise().sum();
    });
  }

  // Sum across columns -> [n, 1].
  Value<S> row_sum(Value<S> a) {
    Mat<S> out = val(a).rowwise().sum();
    return unary(std::move(out), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).colwise() += grad(o).col(0);
    });
  }

  Value<S> mean_all(Value<S> a) {
    Mat<S> out(1, 1);
    out(0, 0) = val(a).mean();
    return unary(std::move(out), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() += grad(o)(0, 0) / static_cast<S>(val(a).size());
    });
  }

  Value<S> sum_all(Value<S> a) {
    Mat<S> out(1, 1);
    out(0, 0) = val(a).sum();
    return unary(std::move(out), a, [this](Value<S> o, Value<S> a) {
      grad_mut(a).array() += grad(o)(0, 0);
    });
  }

  // c0 + sum_i coeffs[i] * scalars[i], all 1x1.
  Value<S> weighted_sum(const std::vector<Value<S>>& scalars,
                        const std::vector<S>& coeffs, S c0 = S(0)) {
    if (scalars.size() != coeffs.size())
      throw NumericError("weighted_sum: size mismatch");
    Mat<S> out(1, 1);
    out(0, 0) = c0;
    for (std::size_t i = 0; i < scalars.size(); ++i)
      out(0, 0) += coeffs[i] * val(scalars[i])(0, 0);
    bool any = recording_ && any_needs_grad(scalars);
    Value<S> o = push(std::move(out), any, {});
    if (any) {
      auto ss = scalars;
      auto cc = coeffs;
      nodes_[o.idx].pullback = [this, o, ss, cc]() {
        for (std::size_t i = 0; i < ss.size(); ++i)
          if (needs_grad(ss[i])) grad_mut(ss[i])(0, 0) += cc[i] * grad(o)(0, 0);
      };
    }
    return o;
  }

  // Scaled dot-product attention over `n_blocks` independent tasks and
  // `heads` head slices of the feature dim. q: [nb*m, d], k/v: [nb*n, d].
  // Projections live outside; this node is softmax(QK^T/sqrt(dk))V per
  // (block, head) with head results written back to their column slice.
  Value<S> attention(Value<S> q, Value<S> k, Value<S> v, long n_blocks,
                     long heads) {
    const long d = val(q).cols();
    if (d % heads != 0) throw ConfigError("feature dim not divisible by heads");
    if (val(k).rows() != val(v).rows() || val(k).cols() != d ||
        val(v).cols() != d)
      throw NumericError("attention: key/value shape mismatch");
    const long dk = d / heads;
    const long m = val(q).rows() / n_blocks;
    const long n = val(k).rows() / n_blocks;
    if (m * n_blocks != val(q).rows() || n * n_blocks != val(k).rows())
      throw NumericError("attention: rows not divisible into blocks");
    if (n < 1) throw NumericError("attention: empty key set");
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dk));

    Mat<S> out(n_blocks * m, d);
    auto weights = std::make_shared<std::vector<Mat<S>>>();
    const bool rec = recording_ && (needs_grad(q) || needs_grad(k) || needs_grad(v));
    if (rec) weights->reserve(static_cast<std::size_t>(n_blocks * heads));

    for (long b = 0; b < n_blocks; ++b) {
      for (long h = 0; h < heads; ++h) {
        const auto qh = val(q).block(b * m, h * dk, m, dk);
        const auto kh = val(k).block(b * n, h * dk, n, dk);
        const auto vh = val(v).block(b * n, h * dk, n, dk);
        Mat<S> scores = qh * kh.transpose() * inv_sqrt;
        // Row-stable softmax.
        for (long i = 0; i < m; ++i) {
          auto row = scores.row(i);
          const S mx = row.maxCoeff();
          row = (row.array() - mx).exp();
          row /= row.sum();
        }
        out.block(b * m, h * dk, m, dk).noalias() = scores * vh;
        if (rec) weights->push_back(std::move(scores));
      }
    }

    Value<S> o = push(std::move(out), rec, {});
    if (rec) {
      nodes_[o.idx].pullback = [this, o, q, k, v, n_blocks, heads, m, n, dk,
                                inv_sqrt, weights]() {
        const Mat<S>& g = grad(o);
        for (long b = 0; b < n_blocks; ++b) {
          for (long h = 0; h < heads; ++h) {
            const Mat<S>& w = (*weights)[static_cast<std::size_t>(b * heads + h)];
            const auto gh = g.block(b * m, h * dk, m, dk);
            const auto vh = val(v).block(b * n, h * dk, n, dk);
            if (needs_grad(v))
              grad_mut(v).block(b * n, h * dk, n, dk).noalias() +=
                  w.transpose() * gh;
            if (needs_grad(q) || needs_grad(k)) {
              Mat<S> dw = gh * vh.transpose();  // [m, n]
              Mat<S> ds = w.cwiseProduct(dw);
              const Vec<S> rs = ds.rowwise().sum();
              ds.noalias() -= rs.asDiagonal() * w;
              ds *= inv_sqrt;
              if (needs_grad(q))
                grad_mut(q).block(b * m, h * dk, m, dk).noalias() +=
                    ds * val(k).block(b * n, h * dk, n, dk);
              if (needs_grad(k))
                grad_mut(k).block(b * n, h * dk, n, dk).noalias() +=
                    ds.transpose() * val(q).block(b * m, h * dk, m, dk);
            }
          }
        }
      };
    }
    return o;
  }

 private:
  bool recording_;
  std::vector<Node> nodes_;

  friend struct Value<S>;

  static bool any_needs_grad_impl(const Tape* t, const std::vector<Value<S>>& vs) {
    for (auto v : vs)
      if (t->nodes_[v.idx].needs_grad) return true;
    return false;
  }
  bool any_needs_grad(const std::vector<Value<S>>& vs) const {
    return any_needs_grad_impl(this, vs);
  }

  Value<S> push(Mat<S> v, bool needs_grad, std::function<void()> pb) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = Mat<S>::Zero(n.val.rows(), n.val.cols());
    n.pullback = std::move(pb);
    nodes_.push_back(std::move(n));
    return Value<S>{this, static_cast<long>(nodes_.size()) - 1};
  }

  template <class F>
  Value<S> unary(Mat<S> out, Value<S> a, F&& back) {
    const bool rec = recording_ && needs_grad(a);
    Value<S> o = push(std::move(out), rec, {});
    if (rec) {
      nodes_[o.idx].pullback = [back = std::forward<F>(back), o, a]() {
        back(o, a);
      };
    }
    return o;
  }

  template <class F>
  Value<S> unary_or_binary(Mat<S> out, Value<S> a, Value<S> b, F&& back) {
    const bool rec = recording_ && (needs_grad(a) || needs_grad(b));
    Value<S> o = push(std::move(out), rec, {});
    if (rec) {
      nodes_[o.idx].pullback = [back = std::forward<F>(back), o, a, b]() {
        back(o, a, b);
      };
    }
    return o;
  }

  Value<S> block_reduce_rows(Value<S> a, long n_blocks, bool mean) {
    const long n = val(a).rows(), d = val(a).cols();
    if (n % n_blocks != 0) throw NumericError("block reduce: bad block count");
    const long r = n / n_blocks;
    Mat<S> out(n_blocks, d);
    for (long b = 0; b < n_blocks; ++b) {
      out.row(b) = val(a).middleRows(b * r, r).colwise().sum();
      if (mean) out.row(b) /= static_cast<S>(r);
    }
    return unary(std::move(out), a, [this, n_blocks, r, mean](Value<S> o, Value<S> a) {
      const Mat<S>& g = grad(o);
      const S w = mean ? S(1) / static_cast<S>(r) : S(1);
      for (long b = 0; b < n_blocks; ++b)
        grad_mut(a).middleRows(b * r, r).rowwise() += (g.row(b) * w).eval();
    });
  }

  void check_same_shape(Value<S> a, Value<S> b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw NumericError(std::string(op) + ": shape mismatch");
  }
  void check_cols(Value<S> a, long want, const char* op) const {
    if (val(a).cols() != want)
      throw NumericError(std::string(op) + ": inner dim mismatch");
  }
};

template <class S>
const Mat<S>& Value<S>::val() const {
  return tape->val(*this);
}

}  // namespace noisynp
