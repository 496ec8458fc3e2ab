#pragma once

// Small parameterised building blocks shared by both branches.

#include <cmath>
#include <random>
#include <string>

#include "dphdun/ops.hpp"
#include "dphdun/optim.hpp"

namespace dphdun::nn {

template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::size_t stride = 1, padding = 0;

  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t kernel, std::mt19937_64& rng, std::size_t stride_ = 1, bool with_bias = true)
      : stride(stride_), padding(kernel / 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel * kernel));
    weight = ps.uniform(name + ".weight", {cout, cin, kernel, kernel}, bound, rng);
    if (with_bias) bias = ps.constant(name + ".bias", {cout}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::conv2d(x, weight, bias, stride, padding);
  }
};

// 2x2 stride-2 transposed convolution.
template <class T>
struct Upsample {
  Tensor<T> weight, bias;

  Upsample() = default;
  Upsample(ParameterSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
           std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cout * 4));
    weight = ps.uniform(name + ".weight", {cin, cout, 2, 2}, bound, rng);
    bias = ps.constant(name + ".bias", {cout}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::conv_transpose2d(x, weight, bias, 2, 0);
  }
};

// Per-pixel layer norm across channels of an [N,C,H,W] map.
template <class T>
struct ChannelLayerNorm {
  Tensor<T> gamma, beta;

  ChannelLayerNorm() = default;
  ChannelLayerNorm(ParameterSet<T>& ps, const std::string& name, std::size_t channels) {
    gamma = ps.constant(name + ".gamma", {channels}, T(1));
    beta = ps.constant(name + ".beta", {channels}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, 1, gamma, beta); }
};

/// Spatial gate: x * sigmoid(conv7x7([max_c x ; mean_c x])).
template <class T>
struct SpatialAttention {
  Conv2d<T> conv;

  SpatialAttention() = default;
  SpatialAttention(ParameterSet<T>& ps, const std::string& name, std::mt19937_64& rng)
      : conv(ps, name + ".conv", 2, 1, 7, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto pooled = ops::concat<T>({ops::reduce_max(x, 1), ops::reduce_mean(x, 1)}, 1);
    return ops::mul(x, ops::sigmoid(conv(pooled)));
  }
};

/// Squeeze-excite channel gate with reduction ratio 4.
template <class T>
struct ChannelAttention {
  Conv2d<T> squeeze, excite;

  ChannelAttention() = default;
  ChannelAttention(ParameterSet<T>& ps, const std::string& name, std::size_t channels,
                   std::mt19937_64& rng) {
    const std::size_t hidden = std::max<std::size_t>(1, channels / 4);
    squeeze = Conv2d<T>(ps, name + ".squeeze", channels, hidden, 1, rng);
    excite = Conv2d<T>(ps, name + ".excite", hidden, channels, 1, rng);
  }

  Tensor<T> gate(const Tensor<T>& x) const {
    return ops::sigmoid(excite(ops::gelu(squeeze(ops::global_avg_pool(x)))));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::mul(x, gate(x)); }
};

}  // namespace dphdun::nn
