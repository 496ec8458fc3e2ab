#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "dphdun/config.hpp"
#include "dphdun/image_io.hpp"
#include "dphdun/metrics.hpp"
#include "support.hpp"

using namespace dphdun;
using dphdun::testing::random_tensor;
using T64 = Tensor<double>;

namespace {

// Direct-formula SSIM: 2D Gaussian weights, every valid window summed in place.
double naive_ssim(const T64& a, const T64& b) {
  const std::size_t h = a.size(2), w = a.size(3), n = 11;
  std::vector<double> win(n * n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double di = double(i) - 5.0, dj = double(j) - 5.0;
      win[i * n + j] = std::exp(-(di * di + dj * dj) / (2 * 1.5 * 1.5));
      total += win[i * n + j];
    }
  for (auto& v : win) v /= total;
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + n <= h; ++y)
    for (std::size_t x = 0; x + n <= w; ++x) {
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          mx += win[i * n + j] * a[(y + i) * w + x + j];
          my += win[i * n + j] * b[(y + i) * w + x + j];
        }
      double vx = 0, vy = 0, cov = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double dx = a[(y + i) * w + x + j] - mx, dy = b[(y + i) * w + x + j] - my;
          vx += win[i * n + j] * dx * dx;
          vy += win[i * n + j] * dy * dy;
          cov += win[i * n + j] * dx * dy;
        }
      acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return acc / double(count);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dphdun_io_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Psnr, Examples) {
  dphdun::testing::Rng rng(1);
  auto a = random_tensor({1, 1, 8, 8}, rng, 0, 1);
  EXPECT_TRUE(metrics::psnr(a, a).identical);
  auto p = metrics::psnr(T64::zeros({1, 1, 4, 4}), T64::full({1, 1, 4, 4}, 0.5));
  EXPECT_FALSE(p.identical);
  EXPECT_NEAR(p.db, 6.0206, 1e-4);
  EXPECT_NEAR(p.db, 10 * std::log10(4.0), 1e-12);
  EXPECT_NEAR(metrics::psnr(T64::zeros({1, 1, 4, 4}), T64::full({1, 1, 4, 4}, 0.5), 255.0).db,
              10 * std::log10(255.0 * 255.0 / 0.25), 1e-12);
  EXPECT_THROW(metrics::psnr(a, T64::zeros({1, 1, 8, 4})), DimensionError);
}

TEST(Psnr, SymmetricAndMatchesDirectFormula) {
  dphdun::testing::Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    auto a = random_tensor({1, 1, 12, 9}, rng, 0, 1), b = random_tensor({1, 1, 12, 9}, rng, 0, 1);
    EXPECT_EQ(metrics::psnr(a, b).db, metrics::psnr(b, a).db);
    double se = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
    EXPECT_NEAR(metrics::psnr(a, b).db, -10 * std::log10(se / double(a.numel())), 1e-6);
  }
}

TEST(Ssim, SelfSimilarityAndConstantImages) {
  dphdun::testing::Rng rng(3);
  auto a = random_tensor({1, 1, 16, 20}, rng, 0, 1);
  EXPECT_NEAR(metrics::ssim(a, a), 1.0, 1e-12);
  for (auto [u, v] : {std::pair{0.1, 0.9}, std::pair{0.0, 1.0}, std::pair{0.4, 0.5}}) {
    const double expected = (2 * u * v + 1e-4) / (u * u + v * v + 1e-4);
    EXPECT_NEAR(metrics::ssim(T64::full({1, 1, 12, 12}, u), T64::full({1, 1, 12, 12}, v)), expected, 1e-9);
  }
  EXPECT_LT(metrics::ssim(T64::full({1, 1, 12, 12}, 0.1), T64::full({1, 1, 12, 12}, 0.9)), 0.5);
}

TEST(Ssim, MatchesNaiveReferenceAndIsSymmetric) {
  dphdun::testing::Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const std::size_t h = dphdun::testing::pick(rng, 11, 24), w = dphdun::testing::pick(rng, 11, 24);
    auto a = random_tensor({1, 1, h, w}, rng, 0, 1), b = random_tensor({1, 1, h, w}, rng, 0, 1);
    const double s = metrics::ssim(a, b);
    EXPECT_NEAR(s, naive_ssim(a, b), 1e-6);
    EXPECT_NEAR(s, metrics::ssim(b, a), 1e-12);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Ssim, Errors) {
  EXPECT_THROW(metrics::ssim(T64::zeros({1, 1, 10, 20}), T64::zeros({1, 1, 10, 20})), GeometryError);
  EXPECT_THROW(metrics::ssim(T64::zeros({1, 1, 12, 12}), T64::zeros({1, 1, 12, 13})), DimensionError);
  EXPECT_THROW(metrics::ssim(T64::zeros({1, 2, 12, 12}), T64::zeros({1, 2, 12, 12})), DimensionError);
}

TEST(Noise, ZeroSigmaAndDeterminism) {
  dphdun::testing::Rng rng(5);
  auto y = random_tensor({16, 10}, rng);
  EXPECT_EQ(metrics::add_gaussian_noise(y, 0.0, 1).vec(), y.vec());
  EXPECT_EQ(metrics::add_gaussian_noise(y, 0.002, 9).vec(), metrics::add_gaussian_noise(y, 0.002, 9).vec());
  EXPECT_NE(metrics::add_gaussian_noise(y, 0.002, 9).vec(), metrics::add_gaussian_noise(y, 0.002, 10).vec());
  EXPECT_THROW(metrics::add_gaussian_noise(y, -1.0, 1), ContractError);
}

TEST(Noise, SampleVarianceMatches) {
  const std::size_t n = 1000000;
  for (double sigma : {0.001, 0.004, 0.5}) {
    auto z = metrics::add_gaussian_noise(T64::full({n}, 0.25), sigma, 77);
    double mean = 0;
    for (double v : z.data()) mean += v;
    mean /= double(n);
    double var = 0;
    for (double v : z.data()) var += (v - mean) * (v - mean);
    var /= double(n - 1);
    EXPECT_NEAR(var, sigma * sigma, 0.05 * sigma * sigma);
  }
}

TEST(Noise, CommonRandomNumbersAcrossSigma) {
  auto y = T64::zeros({1000});
  auto a = metrics::add_gaussian_noise(y, 0.001, 3), b = metrics::add_gaussian_noise(y, 0.004, 3);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(b[i], 4 * a[i], 1e-15);
}

TEST(Pgm, RoundTripAndErrors) {
  auto img = io::quantize8(io::synthetic_scene(13, 21, 4));
  const auto path = temp_file("a.pgm");
  io::write_pgm(path, img);
  auto back = io::read_pgm(path);
  EXPECT_EQ(back.height, 13u);
  EXPECT_EQ(back.width, 21u);
  EXPECT_EQ(back.pixels, img.pixels);

  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n# comment\n2 2\n255\n" << std::string("\x00\xff\x80\x01", 4);
  }
  back = io::read_pgm(path);
  EXPECT_EQ(back.pixels, (std::vector<double>{0.0, 1.0, 128 / 255.0, 1 / 255.0}));
  {
    std::ofstream out(path, std::ios::binary);
    out << "P2\n2 2\n255\n0 0 0 0\n";
  }
  EXPECT_THROW(io::read_pgm(path), IngestionError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n4 4\n255\n" << std::string(5, 'a');
  }
  EXPECT_THROW(io::read_pgm(path), IngestionError);
  std::filesystem::remove(path);
  EXPECT_THROW(io::read_pgm(path), IngestionError);
}

TEST(ImageOps, ReflectPadAndTransforms) {
  io::GrayImage img{2, 3, {1, 2, 3, 4, 5, 6}};
  auto p = io::reflect_pad(io::GrayImage{3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9}}, 4);
  EXPECT_EQ(p.height, 4u);
  EXPECT_EQ(p.width, 4u);
  EXPECT_EQ(p.pixels, (std::vector<double>{1, 2, 3, 2, 4, 5, 6, 5, 7, 8, 9, 8, 4, 5, 6, 5}));
  EXPECT_EQ(io::reflect_pad(p, 4).pixels, p.pixels);
  EXPECT_THROW(io::reflect_pad(img, 8), IngestionError);
  EXPECT_EQ(io::rotate90(img).pixels, (std::vector<double>{3, 6, 2, 5, 1, 4}));
  EXPECT_EQ(io::flip_horizontal(img).pixels, (std::vector<double>{3, 2, 1, 6, 5, 4}));
  EXPECT_EQ(io::flip_vertical(img).pixels, (std::vector<double>{4, 5, 6, 1, 2, 3}));
  auto t = io::to_tensor<float>(img);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 2, 3}));
  EXPECT_EQ(io::from_tensor(t).pixels, img.pixels);
}

TEST(Config, JsonRoundTripAndErrors) {
  TrainConfig c;
  c.gamma = 0.1;
  c.split = {2, 3};
  c.stages = 7;
  c.seed = 99;
  c.precision = "f64";
  const auto text = nlohmann::json(c).dump();
  auto back = parse_config(text);
  EXPECT_EQ(nlohmann::json(back).dump(), text);

  auto partial = parse_config(R"({"stages": 2, "rho": 0.25})");
  EXPECT_EQ(partial.stages, 2u);
  EXPECT_EQ(partial.rho, 0.25);
  EXPECT_EQ(partial.block_size, TrainConfig{}.block_size);

  EXPECT_THROW(parse_config("{\"stages\": 2"), ConfigError);
  EXPECT_THROW(parse_config(R"({"stagez": 2})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"stages": "four"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"gamma": 0})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"rho": 1.5})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"split": [1, 2, 3]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"patch_size": 60})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"precision": "f16"})"), ConfigError);
  EXPECT_THROW(parse_config("[1, 2]"), ConfigError);
  EXPECT_THROW(load_config(temp_file("nope.json").string()), ConfigError);
}
