#pragma once

// Binary PGM (P5) grayscale I/O and small image utilities. Pixels live in
// [0,1]; 8-bit files are divided by their maxval on read.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "dphdun/tensor.hpp"

namespace dphdun::io {

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;  // row-major, [0,1]

  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace detail

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open image " + path.string());
  if (detail::next_token(in) != "P5") throw IngestionError(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  std::size_t maxval = 0;
  try {
    img.width = std::stoul(detail::next_token(in));
    img.height = std::stoul(detail::next_token(in));
    maxval = std::stoul(detail::next_token(in));
  } catch (const std::exception&) {
    throw IngestionError(path.string() + ": malformed PGM header");
  }
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 255) {
    throw IngestionError(path.string() + ": unsupported PGM geometry or maxval");
  }
  std::vector<unsigned char> raw(img.width * img.height);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IngestionError(path.string() + ": truncated pixel data");
  img.pixels.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / static_cast<double>(maxval);
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write image " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// Quantises to 8 bits and back, i.e. what a PGM round trip would yield.
inline GrayImage quantize8(GrayImage img) {
  for (auto& p : img.pixels) p = std::lround(std::clamp(p, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

template <class T>
Tensor<T> to_tensor(const GrayImage& img) {
  std::vector<T> v(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), v.begin(), [](double p) { return static_cast<T>(p); });
  return Tensor<T>::from_data({1, 1, img.height, img.width}, std::move(v));
}

/// Image `index` of an [N,1,H,W] tensor.
template <class T>
GrayImage from_tensor(const Tensor<T>& t, std::size_t index = 0) {
  if (t.dim() != 4 || t.size(1) != 1) throw DimensionError("expected [N,1,H,W] tensor");
  GrayImage img{t.size(2), t.size(3), {}};
  const std::size_t plane = img.height * img.width;
  img.pixels.resize(plane);
  for (std::size_t i = 0; i < plane; ++i) img.pixels[i] = static_cast<double>(t[index * plane + i]);
  return img;
}

/// Stacks equally sized images into one [N,1,H,W] tensor.
template <class T>
Tensor<T> stack(const std::vector<GrayImage>& images) {
  if (images.empty()) throw DimensionError("cannot stack zero images");
  const std::size_t h = images[0].height, w = images[0].width;
  std::vector<T> v;
  v.reserve(images.size() * h * w);
  for (const auto& img : images) {
    if (img.height != h || img.width != w) throw DimensionError("stacked images differ in size");
    for (double p : img.pixels) v.push_back(static_cast<T>(p));
  }
  return Tensor<T>::from_data({images.size(), 1, h, w}, std::move(v));
}

inline GrayImage crop(const GrayImage& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  GrayImage out{h, w, std::vector<double>(h * w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.pixels[y * w + x] = img.at(y0 + y, x0 + x);
  return out;
}

/// Reflection-pads (without repeating the edge pixel) on the bottom/right up
/// to the next multiple of `multiple`.
inline GrayImage reflect_pad(const GrayImage& img, std::size_t multiple) {
  auto up = [multiple](std::size_t v) { return (v + multiple - 1) / multiple * multiple; };
  const std::size_t h = up(img.height), w = up(img.width);
  if (h == img.height && w == img.width) return img;
  if (h - img.height >= img.height || w - img.width >= img.width) {
    throw IngestionError("image too small to reflection-pad to a multiple of " + std::to_string(multiple));
  }
  auto reflect = [](std::size_t i, std::size_t n) { return i < n ? i : 2 * (n - 1) - i; };
  GrayImage out{h, w, std::vector<double>(h * w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      out.pixels[y * w + x] = img.at(reflect(y, img.height), reflect(x, img.width));
  return out;
}

inline GrayImage flip_horizontal(const GrayImage& img) {
  GrayImage out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.pixels[y * img.width + x] = img.at(y, img.width - 1 - x);
  return out;
}

inline GrayImage flip_vertical(const GrayImage& img) {
  GrayImage out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.pixels[y * img.width + x] = img.at(img.height - 1 - y, x);
  return out;
}

// 90 degrees counter-clockwise.
inline GrayImage rotate90(const GrayImage& img) {
  GrayImage out{img.width, img.height, std::vector<double>(img.pixels.size())};
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.pixels[y * out.width + x] = img.at(x, img.width - 1 - y);
  return out;
}

/// Sorted list of *.pgm files in a directory.
inline std::vector<std::filesystem::path> list_pgm(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IngestionError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Deterministic synthetic test scene: smooth shading, a few hard-edged
/// shapes and a sinusoidal texture patch, in [0,1].
inline GrayImage synthetic_scene(std::size_t height, std::size_t width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GrayImage img{height, width, std::vector<double>(height * width)};
  const double gx = u(rng) - 0.5, gy = u(rng) - 0.5, base = 0.3 + 0.4 * u(rng);
  struct Disc {
    double cy, cx, r, v;
  };
  struct Rect {
    double y0, x0, y1, x1, v;
  };
  std::vector<Disc> discs;
  std::vector<Rect> rects;
  for (int i = 0; i < 3; ++i) discs.push_back({u(rng) * height, u(rng) * width, (0.1 + 0.2 * u(rng)) * width, u(rng)});
  for (int i = 0; i < 2; ++i) {
    const double y0 = u(rng) * height, x0 = u(rng) * width;
    rects.push_back({y0, x0, y0 + (0.2 + 0.3 * u(rng)) * height, x0 + (0.2 + 0.3 * u(rng)) * width, u(rng)});
  }
  const double freq = 0.3 + 0.5 * u(rng), ty = u(rng) * height / 2, tx = u(rng) * width / 2;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      double v = base + gx * fx / static_cast<double>(width) + gy * fy / static_cast<double>(height);
      for (const auto& r : rects)
        if (fy >= r.y0 && fy < r.y1 && fx >= r.x0 && fx < r.x1) v = 0.5 * v + 0.5 * r.v;
      for (const auto& d : discs)
        if ((fy - d.cy) * (fy - d.cy) + (fx - d.cx) * (fx - d.cx) < d.r * d.r) v = 0.4 * v + 0.6 * d.v;
      if (fy >= ty && fy < ty + height / 3.0 && fx >= tx && fx < tx + width / 3.0) {
        v += 0.15 * std::sin(freq * fx) * std::cos(freq * fy);
      }
      img.pixels[y * width + x] = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

}  // namespace dphdun::io
