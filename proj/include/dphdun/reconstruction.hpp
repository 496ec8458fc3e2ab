#pragma once

// Reconstruction branch: K unrolled proximal-gradient stages. Each stage takes
// a gradient step with a learned per-pixel step map, then a learned proximal
// mapping made of a block-masked attention followed by a soft-map-modulated
// three-scale encoder/decoder that carries features to the next stage.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "dphdun/hyperprior.hpp"
#include "dphdun/nn.hpp"
#include "dphdun/sampling.hpp"

namespace dphdun::recon {

template <class T>
struct StageState {
  Tensor<T> x;                 // [N,1,H,W]
  std::array<Tensor<T>, 3> z;  // (C,H,W), (2C,H/2,W/2), (4C,H/4,W/4)
};

/// Constant k/K map of shape [N,1,H,W].
template <class T>
Tensor<T> stage_factor(std::size_t k, std::size_t stages, const Shape& image_shape) {
  if (stages == 0 || k < 1 || k > stages) {
    throw ContractError("stage index " + std::to_string(k) + " outside 1.." + std::to_string(stages));
  }
  return Tensor<T>::full({image_shape[0], 1, image_shape[2], image_shape[3]},
                         static_cast<T>(static_cast<double>(k) / static_cast<double>(stages)));
}

/// Step-size generator: concat(grad, features, stage) -> channel gate ->
/// conv-ReLU-conv-ReLU-conv -> one-channel step map (sign unconstrained).
template <class T>
struct StepSizeNet {
  nn::ChannelAttention<T> gate;
  nn::Conv2d<T> conv1, conv2, conv3;
  std::size_t feature_channels = 0;

  StepSizeNet() = default;
  StepSizeNet(ParameterSet<T>& ps, const std::string& name, std::size_t channels, std::mt19937_64& rng)
      : gate(ps, name + ".ca", channels + 2, rng),
        conv1(ps, name + ".conv1", channels + 2, channels, 3, rng),
        conv2(ps, name + ".conv2", channels, channels, 3, rng),
        conv3(ps, name + ".conv3", channels, 1, 3, rng),
        feature_channels(channels) {}

  Tensor<T> operator()(const hyperprior::HyperpriorSignal<T>& h, const Tensor<T>& m_stage) const {
    if (h.features.size(1) != feature_channels) {
      throw DimensionError("step network expects " + std::to_string(feature_channels) +
                           " feature channels, got " + std::to_string(h.features.size(1)));
    }
    auto f_in = ops::concat<T>({h.grad_map, h.features, m_stage}, 1);
    auto f_ca = gate(f_in);
    return conv3(ops::relu(conv2(ops::relu(conv1(f_ca)))));
  }
};

/// r = x - p * sum_i Phi_i^T (Phi_i x - y_i).
template <class T>
Tensor<T> gradient_step(const Tensor<T>& x_prev, const Tensor<T>& y1, const Tensor<T>& y2,
                        const sampling::DualSampler<T>& s, const Tensor<T>& step_map) {
  auto g = ops::add(sampling::data_grad(s.phi1, x_prev, y1), sampling::data_grad(s.phi2, x_prev, y2));
  return ops::sub(x_prev, ops::mul(step_map, g));
}

/// [N,C,H,W] -> [N, (H/t)(W/t), C t^2]; token rows are t x t pixel cells in
/// row-major order, features ordered (channel, dy, dx).
inline std::shared_ptr<const std::vector<std::size_t>> token_index(const Shape& s, std::size_t t) {
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t ty = h / t, tx = w / t, d = c * t * t;
  auto idx = std::make_shared<std::vector<std::size_t>>(n * c * h * w);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ty; ++i)
      for (std::size_t j = 0; j < tx; ++j)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t dy = 0; dy < t; ++dy)
            for (std::size_t dx = 0; dx < t; ++dx)
              (*idx)[((b * ty * tx + i * tx + j) * d) + (ch * t + dy) * t + dx] =
                  ((b * c + ch) * h + i * t + dy) * w + j * t + dx;
  return idx;
}

template <class T>
Tensor<T> to_tokens(const Tensor<T>& x, std::size_t t) {
  const auto& s = x.shape();
  if (s[2] % t || s[3] % t) throw GeometryError("feature map not divisible by token size");
  return ops::gather(x, {s[0], (s[2] / t) * (s[3] / t), s[1] * t * t}, token_index(s, t));
}

template <class T>
Tensor<T> from_tokens(const Tensor<T>& tokens, const Shape& map_shape, std::size_t t) {
  return ops::gather(tokens, map_shape, sampling::inverse_index(*token_index(map_shape, t)));
}

struct AttentionOptions {
  std::size_t token = 1;        // token cell side in pixels
  std::size_t token_cap = 4096;
};

/// Hard attention: R = proj(r); A = softmax(Q K^T / sqrt(d)) (V * mask) + R.
template <class T>
struct HardAttention {
  nn::Conv2d<T> proj, wq, wk, wv;
  AttentionOptions opts;

  HardAttention() = default;
  HardAttention(ParameterSet<T>& ps, const std::string& name, std::size_t channels, AttentionOptions o,
                std::mt19937_64& rng)
      : proj(ps, name + ".proj", 1, channels, 3, rng),
        wq(ps, name + ".wq", channels, channels, 1, rng, 1, false),
        wk(ps, name + ".wk", channels, channels, 1, rng, 1, false),
        wv(ps, name + ".wv", channels, channels, 1, rng, 1, false),
        opts(o) {}

  Tensor<T> project(const Tensor<T>& r) const { return proj(r); }

  /// Attention on already projected features. An undefined mask means no masking.
  Tensor<T> attend(const Tensor<T>& features, const Tensor<T>& mask) const {
    const auto& s = features.shape();
    const std::size_t tokens = (s[2] / opts.token) * (s[3] / opts.token);
    if (tokens > opts.token_cap) {
      throw ResourceError("attention over " + std::to_string(tokens) + " tokens exceeds cap " +
                          std::to_string(opts.token_cap));
    }
    auto v = wv(features);
    if (mask.defined()) v = ops::mul(v, mask);
    auto out = ops::scaled_dot_attention(to_tokens(wq(features), opts.token), to_tokens(wk(features), opts.token),
                                         to_tokens(v, opts.token));
    return ops::add(from_tokens(out, s, opts.token), features);
  }

  Tensor<T> operator()(const Tensor<T>& r, const Tensor<T>& mask) const { return attend(project(r), mask); }
};

/// LN -> dual attention (spatial + channel, summed) and LN -> FFN, each with a
/// residual connection.
template <class T>
struct DualAttentionUnit {
  nn::ChannelLayerNorm<T> norm1, norm2;
  nn::Conv2d<T> body, ffn1, ffn2;
  nn::SpatialAttention<T> sa;
  nn::ChannelAttention<T> ca;

  DualAttentionUnit() = default;
  DualAttentionUnit(ParameterSet<T>& ps, const std::string& name, std::size_t c, std::mt19937_64& rng)
      : norm1(ps, name + ".ln1", c),
        norm2(ps, name + ".ln2", c),
        body(ps, name + ".dab.conv", c, c, 3, rng),
        ffn1(ps, name + ".ffn.conv1", c, 2 * c, 1, rng),
        ffn2(ps, name + ".ffn.conv2", 2 * c, c, 1, rng),
        sa(ps, name + ".dab.sa", rng),
        ca(ps, name + ".dab.ca", c, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto f = ops::gelu(body(norm1(x)));
    auto y = ops::add(x, ops::add(sa(f), ca(f)));
    return ops::add(y, ffn2(ops::gelu(ffn1(norm2(y)))));
  }
};

/// Soft-map-guided three-scale encoder/decoder.
template <class T>
struct SoftAttention {
  std::array<DualAttentionUnit<T>, 3> enc, dec;
  std::array<nn::Conv2d<T>, 2> down;  // stride-2, doubles channels
  std::array<nn::Upsample<T>, 2> up;  // halves channels
  std::array<nn::Conv2d<T>, 2> fuse;  // 1x1 after skip concatenation
  nn::Conv2d<T> out;
  std::size_t channels = 0;

  SoftAttention() = default;
  SoftAttention(ParameterSet<T>& ps, const std::string& name, std::size_t c, std::mt19937_64& rng) : channels(c) {
    const std::array<std::size_t, 3> ch{c, 2 * c, 4 * c};
    for (std::size_t i = 0; i < 3; ++i) enc[i] = DualAttentionUnit<T>(ps, name + ".enc" + std::to_string(i + 1), ch[i], rng);
    for (std::size_t i = 0; i < 2; ++i) down[i] = nn::Conv2d<T>(ps, name + ".down" + std::to_string(i + 1), ch[i], ch[i + 1], 3, rng, 2);
    for (std::size_t i = 3; i-- > 0;) dec[i] = DualAttentionUnit<T>(ps, name + ".dec" + std::to_string(i + 1), ch[i], rng);
    for (std::size_t i = 2; i-- > 0;) {
      up[i] = nn::Upsample<T>(ps, name + ".up" + std::to_string(i + 1), ch[i + 1], ch[i], rng);
      fuse[i] = nn::Conv2d<T>(ps, name + ".fuse" + std::to_string(i + 1), 2 * ch[i], ch[i], 1, rng);
    }
    out = nn::Conv2d<T>(ps, name + ".out", c, 1, 3, rng);
  }

  /// Per-scale modulation maps m1 = soft, m_{i+1} = half-resize(m_i).
  static std::array<Tensor<T>, 3> pyramid(const Tensor<T>& soft_map) {
    std::array<Tensor<T>, 3> m;
    m[0] = soft_map;
    m[1] = ops::downsample_half(m[0]);
    m[2] = ops::downsample_half(m[1]);
    return m;
  }

  /// T_e^1 = m_1 * A + Z_1: the first encoder input, exposed for inspection.
  static Tensor<T> modulate(const Tensor<T>& m, const Tensor<T>& f, const Tensor<T>& z_prev) {
    return ops::add(ops::mul(m, f), z_prev);
  }

  StageState<T> operator()(const Tensor<T>& a, const std::array<Tensor<T>, 3>& z_prev,
                           const Tensor<T>& soft_map) const {
    if (a.size(2) % 4 || a.size(3) % 4) {
      throw GeometryError("soft attention needs extents divisible by 4, got " + shape_str(a.shape()));
    }
    const auto m = pyramid(soft_map);
    std::array<Tensor<T>, 3> e;
    Tensor<T> f = a;
    for (std::size_t i = 0; i < 3; ++i) {
      e[i] = enc[i](modulate(m[i], f, z_prev[i]));
      if (i < 2) f = down[i](e[i]);
    }
    StageState<T> s;
    s.z[2] = dec[2](e[2]);
    for (std::size_t i = 2; i-- > 0;) {
      s.z[i] = dec[i](fuse[i](ops::concat<T>({up[i](s.z[i + 1]), e[i]}, 1)));
    }
    s.x = out(s.z[0]);
    return s;
  }
};

/// Zero carry features for the first stage.
template <class T>
std::array<Tensor<T>, 3> zero_carry(const Shape& image_shape, std::size_t c) {
  const std::size_t n = image_shape[0], h = image_shape[2], w = image_shape[3];
  return {Tensor<T>::zeros({n, c, h, w}), Tensor<T>::zeros({n, 2 * c, h / 2, w / 2}),
          Tensor<T>::zeros({n, 4 * c, h / 4, w / 4})};
}

struct StageOptions {
  std::size_t channels = 16;
  AttentionOptions attention;
  bool use_step_net = true;
};

/// One unrolled stage: step map, gradient step, hard then soft attention.
template <class T>
struct Stage {
  StepSizeNet<T> step_net;
  Tensor<T> scalar_step;  // used when the step network is disabled
  HardAttention<T> hha;
  SoftAttention<T> hsa;

  Stage() = default;
  Stage(ParameterSet<T>& ps, const std::string& name, const StageOptions& o, std::mt19937_64& rng) {
    if (o.use_step_net) step_net = StepSizeNet<T>(ps, name + ".hssg", o.channels, rng);
    else scalar_step = ps.constant(name + ".step", {1}, T(0.5));
    hha = HardAttention<T>(ps, name + ".hha", o.channels, o.attention, rng);
    hsa = SoftAttention<T>(ps, name + ".hsa", o.channels, rng);
  }

  Tensor<T> step_map(const hyperprior::HyperpriorSignal<T>& h, const Tensor<T>& m_stage) const {
    if (scalar_step.defined()) return ops::mul(Tensor<T>::full(m_stage.shape(), T(1)), scalar_step);
    return step_net(h, m_stage);
  }
};

}  // namespace dphdun::recon
