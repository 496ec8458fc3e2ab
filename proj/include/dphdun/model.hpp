#pragma once

// The full dual-path network: dual sampling, hyperprior branch, K-stage
// unrolled reconstruction.

#include <random>
#include <string>
#include <vector>

#include "dphdun/config.hpp"
#include "dphdun/hyperprior.hpp"
#include "dphdun/reconstruction.hpp"
#include "dphdun/sampling.hpp"

namespace dphdun {

template <class T>
struct Reconstruction {
  Tensor<T> x_final;
  std::vector<Tensor<T>> stages;     // x^(0) .. x^(K)
  std::vector<Tensor<T>> step_maps;  // p^(1) .. p^(K)
  std::vector<double> stage_factors;
  hyperprior::HyperpriorSignal<T> signal;
  hyperprior::GuidanceBundle<T> guidance;
};

template <class T>
class DphDun {
 public:
  explicit DphDun(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    sampler_ = sampling::build_dual_sampler<T>(cfg_.gamma, cfg_.split, cfg_.block_size, cfg_.seed);
    params_.adopt("sampler.phi1", sampler_.phi1.weights);
    params_.adopt("sampler.phi2", sampler_.phi2.weights);
    fuse_ = nn::Conv2d<T>(params_, "init.fuse", 2, 1, 3, rng);

    hyperprior::HyperpriorOptions hopts{cfg_.block_size, cfg_.rho, cfg_.use_hard_mask, cfg_.use_soft_map};
    dhl_ = hyperprior::HyperpriorBranch<T>(params_, "dhl", cfg_.channels, cfg_.rrm_blocks, hopts, rng);

    recon::StageOptions sopts{cfg_.channels, {cfg_.attn_token, cfg_.token_cap}, cfg_.use_step_net};
    for (std::size_t k = 1; k <= cfg_.stages; ++k) {
      stages_.emplace_back(params_, "stage" + std::to_string(k), sopts, rng);
    }
    if (cfg_.freeze_sampler) params_.set_frozen("sampler.", true);
  }

  DphDun(const DphDun&) = delete;
  DphDun& operator=(const DphDun&) = delete;

  const TrainConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const sampling::DualSampler<T>& sampler() const { return sampler_; }
  const nn::Conv2d<T>& fusion() const { return fuse_; }
  const hyperprior::HyperpriorBranch<T>& hyperprior_branch() const { return dhl_; }
  const std::vector<recon::Stage<T>>& stages() const { return stages_; }

  void check_extents(const Shape& image_shape) const {
    const std::size_t a = cfg_.alignment();
    if (image_shape.size() != 4 || image_shape[1] != 1 || image_shape[2] % a || image_shape[3] % a) {
      throw GeometryError("image " + shape_str(image_shape) + " must be [N,1,H,W] with H,W multiples of " +
                          std::to_string(a));
    }
  }

  std::pair<Tensor<T>, Tensor<T>> measure(const Tensor<T>& image) const {
    check_extents(image.shape());
    return sampling::sample(sampler_, image);
  }

  /// Reconstruction from (possibly perturbed) measurements.
  Reconstruction<T> reconstruct(const Tensor<T>& y1, const Tensor<T>& y2, const Shape& image_shape) const {
    check_extents(image_shape);
    Reconstruction<T> out;
    std::tie(out.signal, out.guidance) = dhl_(sampler_.phi1, y1, image_shape);

    recon::StageState<T> state;
    state.x = sampling::initial_recon(sampler_, y1, y2, fuse_, image_shape);
    state.z = recon::zero_carry<T>(image_shape, cfg_.channels);
    out.stages.push_back(state.x);
    const std::size_t K = stages_.size();
    for (std::size_t k = 1; k <= K; ++k) {
      const auto& stage = stages_[k - 1];
      auto m_stage = recon::stage_factor<T>(k, K, image_shape);
      out.stage_factors.push_back(static_cast<double>(k) / static_cast<double>(K));
      auto p = stage.step_map(out.signal, m_stage);
      auto r = recon::gradient_step(state.x, y1, y2, sampler_, p);
      auto a = stage.hha(r, out.guidance.hard_mask);
      state = stage.hsa(a, state.z, out.guidance.soft_map);
      out.step_maps.push_back(p);
      out.stages.push_back(state.x);
    }
    out.x_final = state.x;
    return out;
  }

  Reconstruction<T> forward(const Tensor<T>& image) const {
    auto [y1, y2] = measure(image);
    return reconstruct(y1, y2, image.shape());
  }

 private:
  TrainConfig cfg_;
  ParameterSet<T> params_;
  sampling::DualSampler<T> sampler_;
  nn::Conv2d<T> fuse_;
  hyperprior::HyperpriorBranch<T> dhl_;
  std::vector<recon::Stage<T>> stages_;
};

/// Plain unrolled gradient descent with a constant scalar step and identity
/// proximal map. Returns x^(0)..x^(stages).
template <class T>
std::vector<Tensor<T>> plain_gradient_descent(const sampling::DualSampler<T>& s, const Tensor<T>& y1,
                                              const Tensor<T>& y2, const Tensor<T>& x0, T step,
                                              std::size_t stages) {
  std::vector<Tensor<T>> xs{x0};
  const auto p = Tensor<T>::full(x0.shape(), step);
  for (std::size_t k = 0; k < stages; ++k) xs.push_back(recon::gradient_step(xs.back(), y1, y2, s, p));
  return xs;
}

}  // namespace dphdun
