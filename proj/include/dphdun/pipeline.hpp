#pragma once

// Whole-image reconstruction, evaluation reports and parameter sweeps: the
// pieces the command-line tool is assembled from.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dphdun/image_io.hpp"
#include "dphdun/metrics.hpp"
#include "dphdun/training.hpp"

namespace dphdun::pipeline {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Shortest text that reads back to the same double; "inf" for infinities.
inline std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ImageRecon {
  io::GrayImage image, hard_mask, soft_map;
};

namespace detail {

inline void paste(io::GrayImage& dst, const io::GrayImage& src, std::size_t y0, std::size_t x0) {
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x) dst.pixels[(y0 + y) * dst.width + x0 + x] = src.at(y, x);
}

}  // namespace detail

/// Reconstructs an image of any size. The image is reflection-padded to the
/// model alignment; if the attention token count of the padded image exceeds
/// the cap it is processed in patch_size tiles. Measurements of tile t get
/// noise of level `sigma` drawn from mix_seed(noise_seed, t), so one seed
/// gives the same draws at every sigma.
template <class T>
ImageRecon reconstruct_image(const DphDun<T>& model, const io::GrayImage& img, double sigma = 0.0,
                             std::uint64_t noise_seed = 0) {
  const auto& cfg = model.config();
  const auto padded = io::reflect_pad(img, cfg.alignment());
  const std::size_t tokens = (padded.height / cfg.attn_token) * (padded.width / cfg.attn_token);
  const std::size_t tile_h = tokens <= cfg.token_cap ? padded.height : cfg.patch_size;
  const std::size_t tile_w = tokens <= cfg.token_cap ? padded.width : cfg.patch_size;

  ImageRecon full;
  full.image = full.hard_mask = full.soft_map = io::GrayImage{padded.height, padded.width,
                                                              std::vector<double>(padded.pixels.size())};
  NoGradGuard guard;
  std::uint64_t tile = 0;
  for (std::size_t y0 = 0; y0 < padded.height; y0 += tile_h)
    for (std::size_t x0 = 0; x0 < padded.width; x0 += tile_w, ++tile) {
      const std::size_t h = std::min(tile_h, padded.height - y0), w = std::min(tile_w, padded.width - x0);
      auto x = io::to_tensor<T>(io::crop(padded, y0, x0, h, w));
      auto [y1, y2] = model.measure(x);
      if (sigma > 0.0) {
        y1 = metrics::add_gaussian_noise(y1, sigma, mix_seed(noise_seed, 2 * tile));
        y2 = metrics::add_gaussian_noise(y2, sigma, mix_seed(noise_seed, 2 * tile + 1));
      }
      auto rec = model.reconstruct(y1, y2, x.shape());
      detail::paste(full.image, io::from_tensor(rec.x_final), y0, x0);
      detail::paste(full.hard_mask, io::from_tensor(rec.guidance.hard_mask), y0, x0);
      auto soft = io::from_tensor(rec.guidance.soft_map);
      for (auto& v : soft.pixels) v -= 1.0;  // (1,2) -> (0,1) for display
      detail::paste(full.soft_map, soft, y0, x0);
    }
  ImageRecon out;
  out.image = io::crop(full.image, 0, 0, img.height, img.width);
  out.hard_mask = io::crop(full.hard_mask, 0, 0, img.height, img.width);
  out.soft_map = io::crop(full.soft_map, 0, 0, img.height, img.width);
  return out;
}

struct EvalRow {
  std::string name;
  bool identical = false;
  double psnr = 0.0;  // +inf when identical
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0, mean_ssim = 0.0;
  double seconds = 0.0;
  nlohmann::json config;
};

inline EvalRow score(const std::string& name, const io::GrayImage& truth, const io::GrayImage& pred) {
  if (truth.height != pred.height || truth.width != pred.width) {
    throw DimensionError(name + ": prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         ", ground truth " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  }
  const auto a = io::to_tensor<double>(truth), b = io::to_tensor<double>(pred);
  const auto p = metrics::psnr(a, b);
  EvalRow r{name, p.identical, p.identical ? std::numeric_limits<double>::infinity() : p.db, 0.0};
  r.ssim = (truth.height >= 11 && truth.width >= 11) ? metrics::ssim(a, b) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

/// Fills the means from the rows.
inline void finalize(EvalReport& rep) {
  double p = 0, s = 0;
  for (const auto& r : rep.rows) {
    p += r.psnr;
    s += r.ssim;
  }
  const double n = static_cast<double>(rep.rows.size());
  rep.mean_psnr = rep.rows.empty() ? 0.0 : p / n;
  rep.mean_ssim = rep.rows.empty() ? 0.0 : s / n;
}

struct NamedImage {
  std::string name;
  io::GrayImage image;
};

/// Reads every *.pgm of a directory, ordered by file name.
inline std::vector<NamedImage> load_directory(const std::filesystem::path& dir) {
  std::vector<NamedImage> out;
  for (const auto& p : io::list_pgm(dir)) out.push_back({p.filename().string(), io::read_pgm(p)});
  if (out.empty()) throw IngestionError("no .pgm images in " + dir.string());
  return out;
}

/// Reconstructs and scores every image. Image i uses noise seed
/// mix_seed(seed, i).
template <class T>
EvalReport evaluate(const DphDun<T>& model, const std::vector<NamedImage>& images, double sigma = 0.0,
                    std::uint64_t seed = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.config = model.config();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto rec = reconstruct_image(model, images[i].image, sigma, mix_seed(seed, i));
    rep.rows.push_back(score(images[i].name, images[i].image, rec.image));
  }
  finalize(rep);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Scores ready-made predictions: prediction i is compared with truth i.
inline EvalReport compare(const std::vector<NamedImage>& truth, const std::vector<NamedImage>& pred) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  for (const auto& t : truth) {
    auto it = std::find_if(pred.begin(), pred.end(), [&](const NamedImage& p) { return p.name == t.name; });
    if (it == pred.end()) throw IngestionError("no prediction for " + t.name);
    rep.rows.push_back(score(t.name, t.image, it->image));
  }
  finalize(rep);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Header, one row per image, then the mean row.
inline void write_csv(std::ostream& out, const EvalReport& rep) {
  out << "image,psnr_db,ssim,identical\n";
  for (const auto& r : rep.rows) {
    out << r.name << ',' << format_number(r.psnr) << ',' << format_number(r.ssim) << ',' << (r.identical ? 1 : 0)
        << '\n';
  }
  const bool all = std::all_of(rep.rows.begin(), rep.rows.end(), [](const EvalRow& r) { return r.identical; });
  out << "mean," << format_number(rep.mean_psnr) << ',' << format_number(rep.mean_ssim) << ','
      << (all && !rep.rows.empty() ? 1 : 0) << '\n';
}

inline nlohmann::json to_json(const EvalReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    rows.push_back({{"image", r.name},
                    {"psnr_db", format_number(r.psnr)},
                    {"ssim", format_number(r.ssim)},
                    {"identical", r.identical}});
  }
  return {{"rows", rows},
          {"mean_psnr_db", format_number(rep.mean_psnr)},
          {"mean_ssim", format_number(rep.mean_ssim)},
          {"seconds", rep.seconds},
          {"config", rep.config}};
}

struct FitPoint {
  double psnr = 0.0, ssim = 0.0, initial_loss = 0.0, final_loss = 0.0, seconds = 0.0;
  FitCurves curves;
};

/// Fits a fresh model to one image for cfg.steps updates, then scores its
/// noiseless reconstruction of that image.
template <class T>
FitPoint fit_and_score(const TrainConfig& cfg, const io::GrayImage& image, std::ostream* log = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer<T> tr(cfg);
  FitPoint fp;
  fp.curves = tr.overfit_single_image(io::to_tensor<T>(image), cfg.steps, log);
  if (!fp.curves.loss.empty()) {
    fp.initial_loss = fp.curves.loss.front();
    fp.final_loss = fp.curves.loss.back();
  }
  const auto row = score("fit", image, reconstruct_image(tr.model(), image).image);
  fp.psnr = row.psnr;
  fp.ssim = row.ssim;
  fp.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return fp;
}

}  // namespace dphdun::pipeline
