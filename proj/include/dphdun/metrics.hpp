#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dphdun/tensor.hpp"

namespace dphdun::metrics {

/// PSNR in dB; an exact match is reported through `identical` instead of
/// an infinite value.
struct Psnr {
  bool identical = false;
  double db = 0.0;
};

template <class T>
Psnr psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  if (a.shape() != b.shape()) {
    throw DimensionError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (!(peak > 0.0)) throw ContractError("psnr: peak must be positive");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  if (s == 0.0) return {true, 0.0};
  const double mse = s / static_cast<double>(a.numel());
  return {false, 10.0 * std::log10(peak * peak / mse)};
}

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size);
  const double c = static_cast<double>(size - 1) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

// Separable 'valid' filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid window positions and
/// over the images of an [N,1,H,W] batch.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.dim() != 4 || a.size(1) != 1) throw DimensionError("ssim expects grayscale [N,1,H,W]");
  constexpr std::size_t kWin = 11;
  const std::size_t n = a.size(0), h = a.size(2), w = a.size(3);
  if (h < kWin || w < kWin) throw GeometryError("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto k = detail::gaussian_window(kWin, 1.5);
  double total = 0.0;
  for (std::size_t img = 0; img < n; ++img) {
    std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      x[i] = static_cast<double>(a[img * h * w + i]);
      y[i] = static_cast<double>(b[img * h * w + i]);
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, h, w, k), my = detail::filter_valid(y, h, w, k);
    const auto sxx = detail::filter_valid(xx, h, w, k), syy = detail::filter_valid(yy, h, w, k);
    const auto sxy = detail::filter_valid(xy, h, w, k);
    double s = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      s += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += s / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(n);
}

/// y + sigma * z with z ~ N(0,1) drawn from a generator seeded with `seed`.
/// For one seed the draws z are the same at every sigma.
template <class T>
Tensor<T> add_gaussian_noise(const Tensor<T>& y, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ContractError("noise sigma must be nonnegative");
  if (sigma == 0.0) return y;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> out(y.vec());
  for (auto& v : out) v = static_cast<T>(static_cast<double>(v) + sigma * dist(rng));
  return Tensor<T>::from_data(y.shape(), std::move(out));
}

}  // namespace dphdun::metrics
