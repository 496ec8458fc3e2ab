#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "dphdun/errors.hpp"

namespace dphdun {

/// Everything needed to rebuild a model and continue training it. The
/// defaults are the desk-scale configuration (patch 64, block 8, 4 stages,
/// 16 channels).
struct TrainConfig {
  double gamma = 0.25;
  std::pair<int, int> split{1, 4};
  std::size_t block_size = 8;
  std::size_t stages = 4;
  std::size_t channels = 16;
  double rho = 0.5;
  double lr = 1e-4;
  std::pair<double, double> betas{0.9, 0.999};
  double eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t epochs = 1;
  std::size_t patch_size = 64;
  std::uint64_t seed = 0;
  bool freeze_sampler = false;

  // architecture knobs
  std::size_t rrm_blocks = 2;
  std::size_t attn_token = 2;
  std::size_t token_cap = 4096;
  bool use_step_net = true;
  bool use_hard_mask = true;
  bool use_soft_map = true;

  // run control
  std::size_t steps = 2000;        // single-image fitting and sweeps
  std::size_t patches_per_epoch = 64;
  bool augment = true;
  std::string data_dir;
  std::string precision = "f32";

  /// Spatial extents must be multiples of this.
  std::size_t alignment() const {
    return std::lcm(std::lcm(block_size, std::size_t{4}), attn_token);
  }

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0,1]");
    if (split.first <= 0 || split.second <= 0) throw ConfigError("split components must be positive");
    if (block_size < 2) throw ConfigError("block_size must be at least 2");
    if (stages < 1) throw ConfigError("stages must be at least 1");
    if (channels < 1) throw ConfigError("channels must be positive");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in (0,1]");
    if (!(lr >= 0.0)) throw ConfigError("lr must be nonnegative");
    if (!(betas.first >= 0.0 && betas.first < 1.0 && betas.second >= 0.0 && betas.second < 1.0)) {
      throw ConfigError("betas must lie in [0,1)");
    }
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (attn_token < 1) throw ConfigError("attn_token must be positive");
    if (patch_size == 0 || patch_size % (4 * block_size) != 0 || patch_size % attn_token != 0) {
      throw ConfigError("patch_size must be a multiple of 4*block_size and of attn_token");
    }
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"gamma", c.gamma},
                     {"split", {c.split.first, c.split.second}},
                     {"block_size", c.block_size},
                     {"stages", c.stages},
                     {"channels", c.channels},
                     {"rho", c.rho},
                     {"lr", c.lr},
                     {"betas", {c.betas.first, c.betas.second}},
                     {"eps", c.eps},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"patch_size", c.patch_size},
                     {"seed", c.seed},
                     {"freeze_sampler", c.freeze_sampler},
                     {"rrm_blocks", c.rrm_blocks},
                     {"attn_token", c.attn_token},
                     {"token_cap", c.token_cap},
                     {"use_step_net", c.use_step_net},
                     {"use_hard_mask", c.use_hard_mask},
                     {"use_soft_map", c.use_soft_map},
                     {"steps", c.steps},
                     {"patches_per_epoch", c.patches_per_epoch},
                     {"augment", c.augment},
                     {"data_dir", c.data_dir},
                     {"precision", c.precision}};
}

// Missing keys keep their defaults; unknown keys are rejected so typos do not
// silently fall back.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const char* known[] = {"gamma", "split", "block_size", "stages", "channels", "rho", "lr",
                                "betas", "eps", "batch_size", "epochs", "patch_size", "seed",
                                "freeze_sampler", "rrm_blocks", "attn_token", "token_cap",
                                "use_step_net", "use_hard_mask", "use_soft_map", "steps",
                                "patches_per_epoch", "augment", "data_dir", "precision"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  try {
    auto get = [&j](const char* key, auto& dst) {
      if (j.contains(key)) j.at(key).get_to(dst);
    };
    get("gamma", c.gamma);
    if (j.contains("split")) {
      auto v = j.at("split").get<std::vector<int>>();
      if (v.size() != 2) throw ConfigError("split must have two entries");
      c.split = {v[0], v[1]};
    }
    get("block_size", c.block_size);
    get("stages", c.stages);
    get("channels", c.channels);
    get("rho", c.rho);
    get("lr", c.lr);
    if (j.contains("betas")) {
      auto v = j.at("betas").get<std::vector<double>>();
      if (v.size() != 2) throw ConfigError("betas must have two entries");
      c.betas = {v[0], v[1]};
    }
    get("eps", c.eps);
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("patch_size", c.patch_size);
    get("seed", c.seed);
    get("freeze_sampler", c.freeze_sampler);
    get("rrm_blocks", c.rrm_blocks);
    get("attn_token", c.attn_token);
    get("token_cap", c.token_cap);
    get("use_step_net", c.use_step_net);
    get("use_hard_mask", c.use_hard_mask);
    get("use_soft_map", c.use_soft_map);
    get("steps", c.steps);
    get("patches_per_epoch", c.patches_per_epoch);
    get("augment", c.augment);
    get("data_dir", c.data_dir);
    get("precision", c.precision);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

inline TrainConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON config: ") + e.what());
  }
  TrainConfig c = j.get<TrainConfig>();
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dphdun
