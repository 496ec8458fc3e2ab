#pragma once

// Block-based dual compressive sampling y = [y1; y2] = [Phi1; Phi2] x.
//
// An [N,1,H,W] image is cut into non-overlapping BxB blocks in row-major block
// order; each block is flattened row-major to a length-B^2 vector. A sensing
// matrix Phi of shape [M, B^2] is applied to every block, so measurements are
// stored as an [N * num_blocks, M] tensor ordered by (image, block).

#include <cmath>
#include <memory>
#include <random>
#include <utility>

#include "dphdun/nn.hpp"
#include "dphdun/ops.hpp"

namespace dphdun::sampling {

struct BlockGrid {
  std::size_t images = 0, height = 0, width = 0, block = 0;

  std::size_t blocks_y() const { return height / block; }
  std::size_t blocks_x() const { return width / block; }
  std::size_t blocks_per_image() const { return blocks_y() * blocks_x(); }
  std::size_t total_blocks() const { return images * blocks_per_image(); }
};

inline BlockGrid grid_for(const Shape& image_shape, std::size_t block) {
  if (image_shape.size() != 4 || image_shape[1] != 1) {
    throw DimensionError("expected a single-channel [N,1,H,W] image, got " + shape_str(image_shape));
  }
  if (block == 0 || image_shape[2] % block || image_shape[3] % block) {
    throw GeometryError("image extents " + shape_str(image_shape) + " not divisible by block size " +
                        std::to_string(block));
  }
  return {image_shape[0], image_shape[2], image_shape[3], block};
}

// index[(blk * B + r) * B + c] = pixel offset of row r, column c of block blk.
inline std::shared_ptr<const std::vector<std::size_t>> block_index(const BlockGrid& g) {
  auto idx = std::make_shared<std::vector<std::size_t>>(g.images * g.height * g.width);
  std::size_t k = 0;
  for (std::size_t n = 0; n < g.images; ++n)
    for (std::size_t by = 0; by < g.blocks_y(); ++by)
      for (std::size_t bx = 0; bx < g.blocks_x(); ++bx)
        for (std::size_t r = 0; r < g.block; ++r)
          for (std::size_t c = 0; c < g.block; ++c)
            (*idx)[k++] = (n * g.height + by * g.block + r) * g.width + bx * g.block + c;
  return idx;
}

inline std::shared_ptr<const std::vector<std::size_t>> inverse_index(const std::vector<std::size_t>& fwd) {
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) (*inv)[fwd[i]] = i;
  return inv;
}

/// [N,1,H,W] -> [N*blocks, B*B]
template <class T>
Tensor<T> blockify(const Tensor<T>& image, std::size_t block) {
  const BlockGrid g = grid_for(image.shape(), block);
  return ops::gather(image, {g.total_blocks(), block * block}, block_index(g));
}

/// Inverse of blockify onto an image of `image_shape`.
template <class T>
Tensor<T> unblockify(const Tensor<T>& blocks, const Shape& image_shape, std::size_t block) {
  const BlockGrid g = grid_for(image_shape, block);
  if (blocks.shape() != Shape{g.total_blocks(), block * block}) {
    throw DimensionError("block tensor " + shape_str(blocks.shape()) + " inconsistent with image " +
                         shape_str(image_shape));
  }
  return ops::gather(blocks, image_shape, inverse_index(*block_index(g)));
}

template <class T>
struct BlockSensingMatrix {
  std::size_t rows = 0;
  std::size_t block = 0;
  Tensor<T> weights;  // [rows, block*block]
};

struct RowSplit {
  std::size_t total = 0, first = 0, second = 0;
};

/// Row budget: total = round(gamma * B^2), first = round(total * s1/(s1+s2))
/// clamped to [1, total-1]; halves round up.
inline RowSplit split_rows(double gamma, std::pair<int, int> split, std::size_t block) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw ConfigError("CS ratio must lie in (0,1], got " + std::to_string(gamma));
  }
  if (split.first <= 0 || split.second <= 0) throw ConfigError("split components must be positive");
  if (block < 2) throw ConfigError("block size must be at least 2");
  const double n = static_cast<double>(block * block);
  RowSplit r;
  r.total = static_cast<std::size_t>(std::floor(gamma * n + 0.5));
  if (r.total < 2) {
    throw ConfigError("measurement budget " + std::to_string(r.total) + " cannot be split in two");
  }
  const auto s1 = static_cast<std::size_t>(split.first);
  const auto s = s1 + static_cast<std::size_t>(split.second);
  r.first = (2 * r.total * s1 + s) / (2 * s);
  r.first = std::clamp<std::size_t>(r.first, 1, r.total - 1);
  r.second = r.total - r.first;
  return r;
}

template <class T>
struct DualSampler {
  BlockSensingMatrix<T> phi1, phi2;
  double gamma = 0;
  std::pair<int, int> split{1, 1};

  std::size_t block() const { return phi1.block; }
};

/// Zero-mean Gaussian sensing matrices with standard deviation 1/B, drawn
/// from a generator seeded with `seed`.
template <class T>
DualSampler<T> build_dual_sampler(double gamma, std::pair<int, int> split, std::size_t block,
                                  std::uint64_t seed) {
  const RowSplit rows = split_rows(gamma, split, block);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / static_cast<double>(block));
  auto draw = [&](std::size_t m) {
    std::vector<T> w(m * block * block);
    for (auto& v : w) v = static_cast<T>(dist(rng));
    return BlockSensingMatrix<T>{m, block, Tensor<T>::from_data({m, block * block}, std::move(w), true)};
  };
  DualSampler<T> s;
  s.phi1 = draw(rows.first);
  s.phi2 = draw(rows.second);
  s.gamma = gamma;
  s.split = split;
  return s;
}

/// Per-block measurements Phi x, shape [N*blocks, M].
template <class T>
Tensor<T> measure(const BlockSensingMatrix<T>& phi, const Tensor<T>& image) {
  return ops::matmul(blockify(image, phi.block), phi.weights, false, true);
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> sample(const DualSampler<T>& s, const Tensor<T>& image) {
  return {measure(s.phi1, image), measure(s.phi2, image)};
}

/// Phi^T y placed back block by block onto an image of `image_shape`.
template <class T>
Tensor<T> adjoint(const BlockSensingMatrix<T>& phi, const Tensor<T>& y, const Shape& image_shape) {
  const BlockGrid g = grid_for(image_shape, phi.block);
  if (y.dim() != 2 || y.size(0) != g.total_blocks() || y.size(1) != phi.rows) {
    throw DimensionError("measurements " + shape_str(y.shape()) + " inconsistent with " +
                         std::to_string(g.total_blocks()) + " blocks of " + std::to_string(phi.rows) +
                         " rows");
  }
  return unblockify(ops::matmul(y, phi.weights), image_shape, phi.block);
}

/// Phi^T (Phi x - y).
template <class T>
Tensor<T> data_grad(const BlockSensingMatrix<T>& phi, const Tensor<T>& x, const Tensor<T>& y) {
  return adjoint(phi, ops::sub(measure(phi, x), y), x.shape());
}

/// x0 = Conv3x3(Concat(Phi1^T y1, Phi2^T y2)).
template <class T>
Tensor<T> initial_recon(const DualSampler<T>& s, const Tensor<T>& y1, const Tensor<T>& y2,
                        const nn::Conv2d<T>& fuse, const Shape& image_shape) {
  auto x1 = adjoint(s.phi1, y1, image_shape);
  auto x2 = adjoint(s.phi2, y2, image_shape);
  return fuse(ops::concat<T>({x1, x2}, 1));
}

}  // namespace dphdun::sampling
