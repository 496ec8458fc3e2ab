#pragma once

// Hyperprior branch: refines the Phi1-only estimate, derives the data-fidelity
// gradient map from it, and turns that map into a block-level hard mask and a
// pixel-level soft confidence map.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dphdun/nn.hpp"
#include "dphdun/sampling.hpp"

namespace dphdun::hyperprior {

template <class T>
struct HyperpriorSignal {
  Tensor<T> features;  // [N,C,H,W]
  Tensor<T> grad_map;  // [N,1,H,W]
  Tensor<T> refined;   // [N,1,H,W]
};

template <class T>
struct GuidanceBundle {
  Tensor<T> hard_mask;  // [N,1,H,W], {0,1}, constant per block; never differentiated
  Tensor<T> soft_map;   // [N,1,H,W], strictly inside (1,2)
  double topk_fraction = 0.5;
};

/// Head conv, `blocks` residual blocks, tail conv with a global skip.
template <class T>
struct RefinementModule {
  nn::Conv2d<T> head, tail;
  std::vector<std::pair<nn::Conv2d<T>, nn::Conv2d<T>>> blocks;

  RefinementModule() = default;
  RefinementModule(ParameterSet<T>& ps, const std::string& name, std::size_t channels,
                   std::size_t num_blocks, std::mt19937_64& rng)
      : head(ps, name + ".head", 1, channels, 3, rng) {
    for (std::size_t i = 0; i < num_blocks; ++i) {
      const std::string b = name + ".res" + std::to_string(i);
      nn::Conv2d<T> c1(ps, b + ".conv1", channels, channels, 3, rng);
      nn::Conv2d<T> c2(ps, b + ".conv2", channels, channels, 3, rng);
      blocks.emplace_back(std::move(c1), std::move(c2));
    }
    tail = nn::Conv2d<T>(ps, name + ".tail", channels, 1, 3, rng);
  }

  /// Returns (refined estimate, features).
  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& coarse) const {
    auto f = head(coarse);
    for (const auto& [c1, c2] : blocks) f = ops::add(f, c2(ops::relu(c1(f))));
    return {ops::add(coarse, tail(f)), f};
  }
};

/// Mean |grad| per BxB block, shape [N, blocks_per_image], row-major blocks.
template <class T>
Tensor<T> block_mean_grad(const Tensor<T>& grad_map, std::size_t block) {
  const auto g = sampling::grid_for(grad_map.shape(), block);
  std::vector<T> out(g.total_blocks(), T(0));
  const auto& v = grad_map.vec();
  for (std::size_t n = 0; n < g.images; ++n)
    for (std::size_t by = 0; by < g.blocks_y(); ++by)
      for (std::size_t bx = 0; bx < g.blocks_x(); ++bx) {
        T s = 0;
        for (std::size_t r = 0; r < block; ++r)
          for (std::size_t c = 0; c < block; ++c)
            s += std::abs(v[(n * g.height + by * block + r) * g.width + bx * block + c]);
        out[(n * g.blocks_y() + by) * g.blocks_x() + bx] = s / static_cast<T>(block * block);
      }
  return Tensor<T>::from_data({g.images, g.blocks_per_image()}, std::move(out));
}

/// ceil(rho * blocks); a 1e-9 slack keeps products like 0.3 * 10 from
/// rounding up to the next integer.
inline std::size_t topk_count(double rho, std::size_t blocks) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("top-k fraction must lie in (0,1]");
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(blocks) - 1e-9));
  return std::clamp<std::size_t>(k, 1, blocks);
}

/// Binary block mask marking the top ceil(rho * blocks) blocks of `g`
/// ([N, blocks] or [blocks]) per image; ties go to the lower block index.
template <class T>
Tensor<T> build_hard_mask(const Tensor<T>& g, double rho, std::size_t block, std::size_t height,
                          std::size_t width) {
  const std::size_t bx = width / block, by = height / block, nb = bx * by;
  if (height % block || width % block) throw GeometryError("mask extents not divisible by block");
  if (g.numel() % nb != 0 || g.numel() == 0) {
    throw DimensionError("block score count " + std::to_string(g.numel()) + " does not match " +
                         std::to_string(nb) + " blocks");
  }
  const std::size_t images = g.numel() / nb;
  const std::size_t k = topk_count(rho, nb);
  std::vector<T> mask(images * height * width, T(0));
  std::vector<std::size_t> order(nb);
  for (std::size_t n = 0; n < images; ++n) {
    const T* s = g.vec().data() + n * nb;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [s](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t blk = order[j], y0 = (blk / bx) * block, x0 = (blk % bx) * block;
      for (std::size_t r = 0; r < block; ++r)
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>((n * height + y0 + r) * width + x0), block, T(1));
    }
  }
  return Tensor<T>::from_data({images, 1, height, width}, std::move(mask));
}

/// Soft confidence map 1 + sigmoid(conv(GeLU(conv(SA(proj(grad)))))).
/// The logit is clamped to +-15 so the result stays strictly inside (1,2)
/// even after rounding to 32-bit floats.
template <class T>
struct SoftMapNet {
  static constexpr T kLogitBound = T(15);

  nn::Conv2d<T> proj;
  nn::SpatialAttention<T> attention;
  nn::Conv2d<T> conv1, conv2;

  SoftMapNet() = default;
  SoftMapNet(ParameterSet<T>& ps, const std::string& name, std::size_t channels, std::mt19937_64& rng)
      : proj(ps, name + ".proj", 1, channels, 3, rng),
        attention(ps, name + ".sa", rng),
        conv1(ps, name + ".conv1", channels, channels, 3, rng),
        conv2(ps, name + ".conv2", channels, 1, 3, rng) {}

  Tensor<T> operator()(const Tensor<T>& grad_map) const {
    auto logit = conv2(ops::gelu(conv1(attention(proj(grad_map)))));
    return ops::add_scalar(ops::sigmoid(clamp_logit(logit)), T(1));
  }

  static Tensor<T> clamp_logit(const Tensor<T>& z) {
    return ops::detail::unary(
        z, [](T v) { return std::clamp(v, -kLogitBound, kLogitBound); },
        [](T v, T) { return (v > -kLogitBound && v < kLogitBound) ? T(1) : T(0); });
  }
};

struct HyperpriorOptions {
  std::size_t block = 8;
  double rho = 0.5;
  bool use_hard_mask = true;
  bool use_soft_map = true;
};

/// The complete hyperprior branch (coarse estimate -> refinement -> guidance).
template <class T>
struct HyperpriorBranch {
  RefinementModule<T> refine;
  SoftMapNet<T> soft;
  HyperpriorOptions opts;

  HyperpriorBranch() = default;
  HyperpriorBranch(ParameterSet<T>& ps, const std::string& name, std::size_t channels,
                   std::size_t res_blocks, HyperpriorOptions o, std::mt19937_64& rng)
      : refine(ps, name + ".rrm", channels, res_blocks, rng), opts(o) {
    if (opts.use_soft_map) soft = SoftMapNet<T>(ps, name + ".ggm", channels, rng);
  }

  std::pair<HyperpriorSignal<T>, GuidanceBundle<T>> operator()(const sampling::BlockSensingMatrix<T>& phi1,
                                                                const Tensor<T>& y1,
                                                                const Shape& image_shape) const {
    HyperpriorSignal<T> h;
    auto coarse = sampling::adjoint(phi1, y1, image_shape);
    std::tie(h.refined, h.features) = refine(coarse);
    h.grad_map = sampling::data_grad(phi1, h.refined, y1);

    GuidanceBundle<T> m;
    m.topk_fraction = opts.rho;
    const std::size_t hgt = image_shape[2], wid = image_shape[3];
    if (opts.use_hard_mask) {
      m.hard_mask = build_hard_mask(block_mean_grad(h.grad_map, opts.block), opts.rho, opts.block, hgt, wid);
    } else {
      m.hard_mask = Tensor<T>::full({image_shape[0], 1, hgt, wid}, T(1));
    }
    m.soft_map = opts.use_soft_map ? soft(h.grad_map) : Tensor<T>::full({image_shape[0], 1, hgt, wid}, T(1));
    return {std::move(h), std::move(m)};
  }
};

}  // namespace dphdun::hyperprior
