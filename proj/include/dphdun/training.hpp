#pragma once

// Training loop, patch extraction and checkpoint persistence.
//
// Checkpoint layout (all integers little-endian):
//   8 bytes   magic "DPHDUNCK"
//   u32       format version
//   u32 + N   UTF-8 JSON: {"config", "value_bytes", "epoch", "global_step",
//             "rng", "adam_steps"}
//   u32       tensor count
//   per tensor: u32 + name bytes, u8 rank, rank x u32 extents, raw values
//             (f32 or f64 per "value_bytes")
// Parameters come first in registration order, followed by their Adam
// moments named "<param>#m" and "<param>#v".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <tuple>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dphdun/image_io.hpp"
#include "dphdun/metrics.hpp"
#include "dphdun/model.hpp"

namespace dphdun {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'H', 'D', 'U', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct FitCurves {
  std::vector<double> loss;
  std::vector<double> psnr;  // PSNR of x^(K) against the target, per step
};

/// Thrown when a loss turns non-finite; carries the curve up to the last
/// finite step.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, FitCurves curves)
      : DivergenceError(what), curves_(std::move(curves)) {}
  const FitCurves& curves() const { return curves_; }

 private:
  FitCurves curves_;
};

/// Grid patches of `patch` x `patch` at `stride`; with `augment`, each patch
/// is independently flipped horizontally, vertically and rotated by 90
/// degrees with probability 0.5 each.
inline std::vector<io::GrayImage> extract_patches(const io::GrayImage& image, std::size_t patch,
                                                  std::size_t stride, bool augment, std::uint64_t seed) {
  if (patch == 0 || stride == 0) throw IngestionError("patch and stride must be positive");
  if (image.height < patch || image.width < patch) {
    throw IngestionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " smaller than patch " + std::to_string(patch));
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<io::GrayImage> out;
  for (std::size_t y = 0; y + patch <= image.height; y += stride)
    for (std::size_t x = 0; x + patch <= image.width; x += stride) {
      auto p = io::crop(image, y, x, patch, patch);
      if (augment) {
        if (coin(rng)) p = io::flip_horizontal(p);
        if (coin(rng)) p = io::flip_vertical(p);
        if (coin(rng)) p = io::rotate90(p);
      }
      out.push_back(std::move(p));
    }
  return out;
}

template <class T>
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : model_(std::make_unique<DphDun<T>>(cfg)), rng_(cfg.seed ^ 0x9E3779B97F4A7C15ull) {}

  DphDun<T>& model() { return *model_; }
  const DphDun<T>& model() const { return *model_; }
  const TrainConfig& config() const { return model_->config(); }
  std::mt19937_64& rng() { return rng_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t global_step() const { return global_step_; }

  /// Where to write a checkpoint of the pre-step state if the loss turns
  /// non-finite. Empty disables the dump.
  void set_divergence_dump(std::filesystem::path path) { dump_path_ = std::move(path); }

  AdamOptions adam_options() const {
    const auto& c = config();
    return {c.lr, c.betas.first, c.betas.second, c.eps};
  }

  /// Forward, MSE against the batch, backward and one Adam update. Returns
  /// the loss before the update.
  double train_step(const Tensor<T>& batch) { return train_step_with_output(batch).first; }

  std::pair<double, Tensor<T>> train_step_with_output(const Tensor<T>& batch) {
    auto rec = model_->forward(batch);
    auto loss = ops::mse(rec.x_final, batch);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      zero_grad(model_->parameters());
      std::string msg = "non-finite loss at step " + std::to_string(global_step_);
      if (!dump_path_.empty()) {
        save(dump_path_);
        msg += "; state dumped to " + dump_path_.string();
      }
      throw DivergenceError(msg);
    }
    loss.backward();
    adam_step(model_->parameters(), adam_options());
    ++global_step_;
    return {value, rec.x_final.detach()};
  }

  /// Fits the model to one image for `steps` updates, recording the loss and
  /// PSNR(x^(K), image) of every step.
  FitCurves overfit_single_image(const Tensor<T>& image, std::size_t steps, std::ostream* log = nullptr) {
    FitCurves c;
    if (log) *log << "step,loss,psnr\n";
    for (std::size_t s = 0; s < steps; ++s) {
      double loss = 0;
      Tensor<T> out;
      try {
        std::tie(loss, out) = train_step_with_output(image);
      } catch (const DivergenceError& e) {
        throw TrainingDiverged(e.what(), c);
      }
      const auto p = metrics::psnr(out, image);
      c.loss.push_back(loss);
      c.psnr.push_back(p.identical ? std::numeric_limits<double>::infinity() : p.db);
      if (log) *log << s << ',' << loss << ',' << c.psnr.back() << '\n';
    }
    return c;
  }

  /// One epoch over random crops of `images`; returns the per-step losses.
  std::vector<double> train_epoch(const std::vector<io::GrayImage>& images, std::ostream* log = nullptr) {
    const auto& cfg = config();
    if (images.empty()) throw IngestionError("no training images");
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> losses;
    std::size_t produced = 0;
    while (produced < cfg.patches_per_epoch) {
      std::vector<io::GrayImage> batch;
      while (batch.size() < cfg.batch_size && produced < cfg.patches_per_epoch) {
        const auto& img = images[pick(rng_)];
        if (img.height < cfg.patch_size || img.width < cfg.patch_size) {
          throw IngestionError("training image smaller than patch size");
        }
        std::uniform_int_distribution<std::size_t> oy(0, img.height - cfg.patch_size);
        std::uniform_int_distribution<std::size_t> ox(0, img.width - cfg.patch_size);
        const std::size_t y0 = oy(rng_), x0 = ox(rng_);
        auto p = io::crop(img, y0, x0, cfg.patch_size, cfg.patch_size);
        if (cfg.augment) {
          if (coin(rng_)) p = io::flip_horizontal(p);
          if (coin(rng_)) p = io::flip_vertical(p);
          if (coin(rng_)) p = io::rotate90(p);
        }
        batch.push_back(std::move(p));
        ++produced;
      }
      auto [loss, out] = train_step_with_output(io::stack<T>(batch));
      losses.push_back(loss);
      if (log) {
        const auto p = metrics::psnr(out, io::stack<T>(batch));
        *log << global_step_ << ',' << loss << ',' << (p.identical ? std::numeric_limits<double>::infinity() : p.db)
             << '\n';
      }
    }
    ++epoch_;
    return losses;
  }

  // -------------------------------------------------------------------------
  // Checkpoints

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Trainer> deserialize(const std::string& bytes);
  static std::unique_ptr<Trainer> load(const std::filesystem::path& path);

 private:
  std::unique_ptr<DphDun<T>> model_;
  std::mt19937_64 rng_;
  std::size_t epoch_ = 0;
  std::size_t global_step_ = 0;
  std::filesystem::path dump_path_;
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out_.append(buf, sizeof(U));
  }
  void bytes(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& s) : s_(s) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, s_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool at_end() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated at byte " + std::to_string(pos_));
    }
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

template <class T>
void write_tensor(ByteWriter& w, const std::string& name, const Shape& shape, const std::vector<T>& values,
                  std::size_t value_bytes) {
  w.bytes(name);
  w.put(static_cast<std::uint8_t>(shape.size()));
  for (auto e : shape) w.put(static_cast<std::uint32_t>(e));
  for (T v : values) {
    if (value_bytes == 4) w.put(static_cast<float>(v));
    else w.put(static_cast<double>(v));
  }
}

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

}  // namespace detail

template <class T>
std::string Trainer<T>::serialize() const {
  const std::size_t value_bytes = sizeof(T);
  nlohmann::json meta;
  meta["config"] = config();
  meta["value_bytes"] = value_bytes;
  meta["epoch"] = epoch_;
  meta["global_step"] = global_step_;
  std::ostringstream rs;
  rs << rng_;
  meta["rng"] = rs.str();
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& p : model_->parameters().all()) steps[p.name] = p.step;
  meta["adam_steps"] = steps;

  detail::ByteWriter w;
  w.str().append(kCheckpointMagic, 8);
  w.put(kCheckpointVersion);
  w.bytes(meta.dump());
  const auto& params = model_->parameters().all();
  w.put(static_cast<std::uint32_t>(3 * params.size()));
  for (const auto& p : params) detail::write_tensor(w, p.name, p.value.shape(), p.value.vec(), value_bytes);
  for (const auto& p : params) {
    detail::write_tensor(w, p.name + "#m", p.value.shape(), p.m, value_bytes);
    detail::write_tensor(w, p.name + "#v", p.value.shape(), p.v, value_bytes);
  }
  return std::move(w.str());
}

template <class T>
void Trainer<T>::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "short write to " + path.string());
}

namespace detail {

// Checks magic and version and parses the metadata block; leaves `r` at the
// tensor table.
inline nlohmann::json read_checkpoint_header(ByteReader& r) {
  using Kind = CheckpointError::Kind;
  const std::string magic = r.raw(8);
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) throw CheckpointError(Kind::kBadMagic, "not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kVersion, "checkpoint version " + std::to_string(version) +
                                              " is not supported (expected version " +
                                              std::to_string(kCheckpointVersion) + ")");
  }
  try {
    auto meta = nlohmann::json::parse(r.bytes());
    if (!meta.is_object()) throw CheckpointError(Kind::kMalformed, "checkpoint metadata is not an object");
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint metadata: ") + e.what());
  }
}

}  // namespace detail

/// Width in bytes (4 or 8) of the values stored in a checkpoint file.
inline std::size_t checkpoint_value_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  detail::ByteReader r(bytes);
  const auto meta = detail::read_checkpoint_header(r);
  if (!meta.contains("value_bytes") || !meta["value_bytes"].is_number_unsigned()) {
    throw CheckpointError(CheckpointError::Kind::kMalformed, "checkpoint metadata lacks value_bytes");
  }
  return meta["value_bytes"].get<std::size_t>();
}

template <class T>
std::unique_ptr<Trainer<T>> Trainer<T>::deserialize(const std::string& bytes) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader r(bytes);
  const nlohmann::json meta = detail::read_checkpoint_header(r);
  TrainConfig cfg;
  std::size_t value_bytes = 0;
  try {
    cfg = meta.at("config").get<TrainConfig>();
    value_bytes = meta.at("value_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint config: ") + e.what());
  }
  if (value_bytes != 4 && value_bytes != 8) throw CheckpointError(Kind::kMalformed, "unsupported value width");

  std::map<std::string, detail::StoredTensor> table;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes();
    detail::StoredTensor t;
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint32_t>());
    const std::size_t n = numel_of(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      t.values[k] = value_bytes == 4 ? static_cast<double>(r.get<float>()) : r.get<double>();
    }
    table[name] = std::move(t);
  }
  if (!r.at_end()) throw CheckpointError(Kind::kMalformed, "trailing bytes after tensor table");

  std::unique_ptr<Trainer<T>> tr;
  try {
    tr = std::make_unique<Trainer<T>>(cfg);
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint config: ") + e.what());
  }
  auto fetch = [&](const std::string& name, const Shape& shape) -> const std::vector<double>& {
    auto it = table.find(name);
    if (it == table.end()) throw CheckpointError(Kind::kMalformed, "checkpoint lacks tensor " + name);
    if (it->second.shape != shape) throw CheckpointError(Kind::kMalformed, "shape mismatch for " + name);
    return it->second.values;
  };
  try {
    for (auto& p : tr->model_->parameters().all()) {
      const auto& v = fetch(p.name, p.value.shape());
      auto dst = p.value.mutable_data();
      for (std::size_t k = 0; k < v.size(); ++k) dst[k] = static_cast<T>(v[k]);
      const auto& m = fetch(p.name + "#m", p.value.shape());
      const auto& s = fetch(p.name + "#v", p.value.shape());
      for (std::size_t k = 0; k < m.size(); ++k) {
        p.m[k] = static_cast<T>(m[k]);
        p.v[k] = static_cast<T>(s[k]);
      }
      p.step = meta.at("adam_steps").at(p.name).template get<std::int64_t>();
    }
    tr->epoch_ = meta.at("epoch").get<std::size_t>();
    tr->global_step_ = meta.at("global_step").get<std::size_t>();
    std::istringstream rs(meta.at("rng").get<std::string>());
    rs >> tr->rng_;
    if (!rs) throw CheckpointError(Kind::kMalformed, "bad generator state");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint metadata: ") + e.what());
  }
  return tr;
}

template <class T>
std::unique_ptr<Trainer<T>> Trainer<T>::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace dphdun
