#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "noisynp/autodiff.hpp"
#include "noisynp/common.hpp"
#include "noisynp/rng.hpp"

namespace noisynp {

// Named parameter tensors with gradient and Adam-moment slots. Iteration
// follows insertion order so updates and serialization are deterministic.
template <class S>
class ParamStore {
 public:
  struct Tensor {
    Mat<S> value;
    Mat<S> grad;
    Mat<S> m;  // first-moment accumulator
    Mat<S> v;  // second-moment accumulator
  };

  Tensor& add(const std::string& name, long rows, long cols) {
    if (map_.count(name)) throw ConfigError("duplicate parameter: " + name);
    order_.push_back(name);
    Tensor t;
    t.value = Mat<S>::Zero(rows, cols);
    t.grad = Mat<S>::Zero(rows, cols);
    t.m = Mat<S>::Zero(rows, cols);
    t.v = Mat<S>::Zero(rows, cols);
    return map_.emplace(name, std::move(t)).first->second;
  }

  bool has(const std::string& name) const { return map_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grads() {
    for (auto& n : order_) map_[n].grad.setZero();
  }

  long count_values() const {
    long c = 0;
    for (auto& n : order_) c += map_.at(n).value.size();
    return c;
  }

  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (auto& n : order_) {
      const Tensor& t = map_.at(n);
      auto& o = out.add(n, t.value.rows(), t.value.cols());
      o.value = t.value.template cast<T>();
      o.m = t.m.template cast<T>();
      o.v = t.v.template cast<T>();
    }
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> map_;
};

// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both
// the weight and its bias.
template <class S>
void init_affine(ParamStore<S>& params, const std::string& prefix, long in,
                 long out, Rng& rng) {
  auto& w = params.add(prefix + ".w", in, out);
  auto& b = params.add(prefix + ".b", 1, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (long i = 0; i < in; ++i)
    for (long j = 0; j < out; ++j)
      w.value(i, j) = static_cast<S>(rng.uniform(-bound, bound));
  for (long j = 0; j < out; ++j)
    b.value(0, j) = static_cast<S>(rng.uniform(-bound, bound));
}

// Binds a parameter tensor into the tape as a gradient-tracking leaf.
template <class S>
Value<S> param_leaf(Tape<S>& tape, ParamStore<S>& params,
                    const std::string& name) {
  return tape.leaf(params.at(name).value, /*needs_grad=*/true);
}

// One tape binding per parameter per episode: repeated uses share a leaf,
// and harvest_grads() moves the accumulated node gradients back into the
// store after backward().
template <class S>
class BoundParams {
 public:
  BoundParams(Tape<S>& tape, ParamStore<S>& store)
      : tape_(&tape), store_(&store) {}

  Value<S> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Value<S> v = param_leaf(*tape_, *store_, name);
    bound_.emplace(name, v);
    return v;
  }

  void harvest_grads() {
    for (auto& [name, v] : bound_) {
      if (tape_->needs_grad(v)) store_->at(name).grad += tape_->grad(v);
    }
  }

  ParamStore<S>& store() { return *store_; }
  Tape<S>& tape() { return *tape_; }

 private:
  Tape<S>* tape_;
  ParamStore<S>* store_;
  std::unordered_map<std::string, Value<S>> bound_;
};

}  // namespace noisynp
