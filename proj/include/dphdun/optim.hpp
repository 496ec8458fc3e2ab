#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dphdun/tensor.hpp"

namespace dphdun {

/// A named learnable tensor together with its Adam moments.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> m;  // first moment
  std::vector<T> v;  // second moment
  std::int64_t step = 0;
  bool frozen = false;
};

/// Ordered registry of parameters. Order is creation order, which fixes both
/// initialisation draws and checkpoint layout.
template <class T>
class ParameterSet {
 public:
  Tensor<T> adopt(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    value.set_requires_grad(true);
    Parameter<T> p;
    p.name = name;
    p.value = value;
    p.m.assign(value.numel(), T(0));
    p.v.assign(value.numel(), T(0));
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return value;
  }

  /// Uniform(-bound, bound) weights; draws happen in double so that f32 and
  /// f64 instances of one configuration start from the same point.
  Tensor<T> uniform(std::string name, Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> data(numel_of(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return adopt(std::move(name), Tensor<T>::from_data(std::move(shape), std::move(data)));
  }

  Tensor<T> constant(std::string name, Shape shape, T value) {
    return adopt(std::move(name), Tensor<T>::full(std::move(shape), value));
  }

  std::size_t size() const { return params_.size(); }
  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  void set_frozen(const std::string& prefix, bool frozen) {
    for (auto& p : params_) {
      if (p.name.rfind(prefix, 0) == 0) {
        p.frozen = frozen;
        p.value.set_requires_grad(!frozen);
        if (frozen) p.value.clear_grad();
      }
    }
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every non-frozen parameter, then the
/// gradients are released. Throws ContractError if a trainable parameter has
/// no gradient.
template <class T>
void adam_step(ParameterSet<T>& params, const AdamOptions& opt) {
  for (const auto& p : params.all()) {
    if (!p.frozen && !p.value.has_grad()) {
      throw ContractError("adam_step: parameter " + p.name + " has no gradient");
    }
  }
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr), eps = static_cast<T>(opt.eps);
  for (auto& p : params.all()) {
    if (p.frozen) continue;
    ++p.step;
    const T c1 = T(1) - static_cast<T>(std::pow(opt.beta1, static_cast<double>(p.step)));
    const T c2 = T(1) - static_cast<T>(std::pow(opt.beta2, static_cast<double>(p.step)));
    auto g = p.value.grad();
    auto x = p.value.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      p.m[i] = b1 * p.m[i] + (T(1) - b1) * g[i];
      p.v[i] = b2 * p.v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = p.m[i] / c1;
      const T vhat = p.v[i] / c2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.value.clear_grad();
  }
}

template <class T>
void zero_grad(ParameterSet<T>& params) {
  for (auto& p : params.all()) p.value.clear_grad();
}

}  // namespace dphdun
